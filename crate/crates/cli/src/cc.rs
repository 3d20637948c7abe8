//! Compiles and runs emitted C99 translation units. The flags keep the
//! compiler IEEE-strict (`-std=c99` disables contraction; we also pass
//! `-ffp-contract=off` explicitly) so compiled kernels agree with the
//! interpreter bit for bit.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use anyhow::{bail, Context, Result};

/// Writes the emitted files into `dir`.
pub fn write_emitted(dir: &Path, emitted: &BTreeMap<String, String>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, content) in emitted {
        std::fs::write(dir.join(name), content)
            .with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

/// Compiles the family's generated tests into an executable and returns
/// its path.
pub fn build_tests(dir: &Path, family: &str) -> Result<std::path::PathBuf> {
    let exe = dir.join(format!("{family}_tests"));
    let status = Command::new("cc")
        .current_dir(dir)
        .args([
            "-std=c99",
            "-O2",
            "-ffp-contract=off",
            "-o",
        ])
        .arg(&exe)
        .arg(format!("{family}_tests.c"))
        .arg(format!("{family}_kernels.c"))
        .arg(format!("{family}_tensors.c"))
        .arg("-lm")
        .status()
        .context("invoking the C compiler")?;
    if !status.success() {
        bail!("C compilation failed for family '{family}'");
    }
    Ok(exe)
}

/// Runs the generated test executable; returns (stdout, pass).
pub fn run_tests(exe: &Path, dump: bool) -> Result<(String, bool)> {
    let mut cmd = Command::new(exe);
    if dump {
        cmd.arg("--dump");
    }
    let out = cmd.output().context("running generated tests")?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    Ok((stdout, out.status.success()))
}

/// Parses `--dump` output: kernel -> tensor -> storage bits.
pub fn parse_dump(stdout: &str) -> BTreeMap<(String, String), Vec<u64>> {
    let mut out: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for line in stdout.lines() {
        let mut it = line.split_whitespace();
        let (Some(kernel), Some(tensor), Some(idx), Some(bits)) =
            (it.next(), it.next(), it.next(), it.next())
        else {
            continue;
        };
        let (Ok(idx), Ok(bits)) = (idx.parse::<usize>(), u64::from_str_radix(bits, 16)) else {
            continue;
        };
        let entry = out.entry((kernel.to_string(), tensor.to_string())).or_default();
        if entry.len() <= idx {
            entry.resize(idx + 1, 0);
        }
        entry[idx] = bits;
    }
    out
}
