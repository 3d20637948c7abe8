//! Command-line driver.
//!
//! Exit codes: 0 ok, 1 diagnostics, 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use einkern::corpus;
use einkern::parse;
use einkern::pipeline::{compile_family, CompileError, EmitKind, PipelineConfig};
use einkern::sppfile;
use einkern_core::ast::Family;
use einkern_core::codegen::c99::Precision;

#[derive(Parser)]
#[command(name = "einkern", about = "Compiler for small Einstein-notation tensor kernels")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Element precision of generated code.
    #[arg(long, value_parser = ["double", "single"], default_value = "double")]
    precision: String,
    /// Vector width in elements for first-dimension padding.
    #[arg(long, default_value_t = 1)]
    align: usize,
    /// Backend priority list, highest first.
    #[arg(long, value_delimiter = ',', default_value = "csc,gemm,copy,loops")]
    backend_order: Vec<String>,
    /// Output directory for emitted files and the report.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Emission target.
    #[arg(long, value_parser = ["c99", "none"], default_value = "c99")]
    emit: String,
    /// Seed of generated unit tests.
    #[arg(long, default_value_t = 20240915)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a kernel file: emit code, tests, and the report.
    Compile {
        input: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Parse and validate only.
    Check { input: PathBuf },
    /// Compile and print the report without emitting code.
    Report {
        input: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run the brute-force verifiers (strength reduction against the
    /// exhaustive oracle, mask minimality) on a kernel file.
    Oracle {
        input: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Compile a bundled corpus family (e.g. adertet_o4s8, aderbox3d_o4,
    /// mra_p4q2t).
    Corpus {
        family: String,
        #[command(flatten)]
        opts: CommonOpts,
    },
}

fn config(opts: &CommonOpts) -> PipelineConfig {
    PipelineConfig {
        precision: if opts.precision == "single" { Precision::F32 } else { Precision::F64 },
        alignment: opts.align.max(1),
        backend_order: opts.backend_order.clone(),
        emit: if opts.emit == "none" { EmitKind::None } else { EmitKind::C99 },
        seed: opts.seed,
        ..Default::default()
    }
}

fn load_family(input: &Path, alignment: usize) -> Result<Family, ExitCode> {
    let text = std::fs::read_to_string(input).map_err(|e| {
        eprintln!("cannot read {}: {e}", input.display());
        ExitCode::from(2)
    })?;
    let file = parse::parse(&text).map_err(|e| {
        eprintln!("{}: {e}", input.display());
        ExitCode::from(1)
    })?;
    let dir = input.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("kernels")
        .replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "_");
    let loader = move |path: &str| -> Result<einkern_core::SparsityPattern> {
        let full = dir.join(path);
        let text = std::fs::read_to_string(&full)
            .with_context(|| format!("reading {}", full.display()))?;
        sppfile::parse_spp(&text)
    };
    parse::to_family(&file, &name, alignment, &loader).map_err(|errors| {
        for e in &errors {
            eprintln!("{}: {e}", input.display());
        }
        ExitCode::from(1)
    })
}

fn compile_and_write(family: &Family, opts: &CommonOpts, write_code: bool) -> ExitCode {
    let cfg = config(opts);
    match compile_family(family, &cfg) {
        Ok(compiled) => {
            for w in &compiled.warnings {
                eprintln!("warning: {w}");
            }
            if let Err(e) = std::fs::create_dir_all(&opts.out_dir) {
                eprintln!("cannot create {}: {e}", opts.out_dir.display());
                return ExitCode::from(2);
            }
            if write_code {
                if let Err(e) = einkern::cc::write_emitted(&opts.out_dir, &compiled.emitted) {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            }
            let report_path = opts.out_dir.join(format!("{}_report.json", family.name));
            let pretty = serde_json::to_string_pretty(&compiled.report).unwrap();
            if let Err(e) = std::fs::write(&report_path, pretty) {
                eprintln!("cannot write report: {e}");
                return ExitCode::from(2);
            }
            for k in &compiled.kernels {
                println!(
                    "{}: nonzero {} hardware {} dense {}",
                    k.name, k.exec.nonzero_flops, k.exec.hardware_flops, k.dense_hardware_flops
                );
            }
            println!("report: {}", report_path.display());
            ExitCode::SUCCESS
        }
        Err(CompileError::Diagnostics(ds)) => {
            for d in ds {
                eprintln!("{d}");
            }
            ExitCode::from(1)
        }
        Err(CompileError::Internal(e)) => {
            eprintln!("internal error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_oracle(family: &Family, opts: &CommonOpts) -> Result<ExitCode> {
    use einkern_core::ast::{deduce_indices, propagate_patterns, NodeKind};
    use einkern_core::eqspp::{check_minimality, compute_eqspp};
    use einkern_core::strength;
    let cfg = config(opts);
    let _ = cfg;
    let mut failures = 0usize;
    for kernel in &family.kernels {
        for stmt in &kernel.statements {
            let mut expr = stmt.desugared_expr();
            deduce_indices(&mut expr, &stmt.target_indices, &family.tensors)
                .map_err(|e| anyhow!("{e}"))?;
            propagate_patterns(&mut expr, &family.tensors).map_err(|e| anyhow!("{e}"))?;
            expr.walk(&mut |node| {
                if let NodeKind::Einsum { children } = &node.kind {
                    let ops: Vec<_> = children
                        .iter()
                        .map(|c| (c.spp.as_ref().unwrap(), &c.indices))
                        .collect();
                    // Mask minimality.
                    match compute_eqspp(&ops, &node.indices) {
                        Ok(eq) => match check_minimality(&ops, &node.indices, &eq) {
                            Ok(true) => println!("PASS minimality {}", kernel.name),
                            Ok(false) => {
                                failures += 1;
                                println!("FAIL minimality {}", kernel.name);
                            }
                            Err(e) => println!("SKIP minimality {} ({e})", kernel.name),
                        },
                        Err(e) => println!("SKIP minimality {} ({e})", kernel.name),
                    }
                    // Strength reduction vs the exhaustive oracle.
                    let masked: Vec<_> = children
                        .iter()
                        .map(|c| (c, c.effective_spp().unwrap()))
                        .collect();
                    match strength::reduce(&masked, &node.indices) {
                        Ok(red) => {
                            let oracle_ops: Vec<_> = children
                                .iter()
                                .map(|c| (&c.indices, c.effective_spp().unwrap()))
                                .collect();
                            match strength::exhaustive_oracle(&oracle_ops, &node.indices) {
                                Ok(best) => {
                                    if red.schedule.cost == best {
                                        println!(
                                            "PASS strength {} cost {}",
                                            kernel.name, best
                                        );
                                    } else {
                                        failures += 1;
                                        println!(
                                            "FAIL strength {} cost {} oracle {best}",
                                            kernel.name, red.schedule.cost
                                        );
                                    }
                                }
                                Err(e) => println!("SKIP strength {} ({e})", kernel.name),
                            }
                        }
                        Err(e) => println!("SKIP strength {} ({e})", kernel.name),
                    }
                }
            });
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Compile { input, opts } => match load_family(&input, opts.align.max(1)) {
            Ok(family) => compile_and_write(&family, &opts, true),
            Err(code) => code,
        },
        Cmd::Check { input } => match load_family(&input, 1) {
            Ok(family) => {
                let diags = einkern_core::ast::validate_family(&family);
                if diags.is_empty() {
                    println!("ok: {} kernels", family.kernels.len());
                    ExitCode::SUCCESS
                } else {
                    for d in diags {
                        eprintln!("{d}");
                    }
                    ExitCode::from(1)
                }
            }
            Err(code) => code,
        },
        Cmd::Report { input, mut opts } => {
            opts.emit = "none".into();
            match load_family(&input, opts.align.max(1)) {
                Ok(family) => compile_and_write(&family, &opts, false),
                Err(code) => code,
            }
        }
        Cmd::Oracle { input, opts } => match load_family(&input, opts.align.max(1)) {
            Ok(family) => match run_oracle(&family, &opts) {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("internal error: {e}");
                    ExitCode::from(2)
                }
            },
            Err(code) => code,
        },
        Cmd::Corpus { family, opts } => match corpus::by_name(&family) {
            Ok(f) => compile_and_write(&f, &opts, true),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
    }
}
