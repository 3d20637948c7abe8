//! Portable C99 emission: kernel routines, tensor constants, and
//! generated unit tests.
//!
//! The emitted loops mirror the interpreter's execution step for step,
//! so compiled kernels agree with interpreted ones bit for bit in the
//! same precision (compile with `-std=c99 -ffp-contract=off`). Float
//! constants are printed as hexadecimal literals, which parse exactly.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{Access, KernelExec, Loop, NaiveExpr, Step, VarInfo};
use crate::ast::ScalarCoeff;
use crate::index::{IndexString, Letter};
use crate::layout::MemoryLayout;

/// Element precision of the emitted code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn ctype(&self) -> &'static str {
        match self {
            Precision::F32 => "float",
            Precision::F64 => "double",
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn literal(&self, v: f64) -> String {
        match self {
            Precision::F64 => hex_f64(v),
            Precision::F32 => hex_f32(v as f32),
        }
    }
}

/// Exact hexadecimal literal of a double.
pub fn hex_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0x0p+0".into() } else { "0x0p+0".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        format!("{sign}0x0.{mant:013x}p-1022")
    } else {
        format!("{sign}0x1.{mant:013x}p{:+}", exp - 1023)
    }
}

/// Exact hexadecimal literal of a float (with `f` suffix).
pub fn hex_f32(v: f32) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0x0p+0f".into() } else { "0x0p+0f".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 31 == 1 { "-" } else { "" };
    let exp = ((bits >> 23) & 0xff) as i64;
    let mant = (bits & ((1u32 << 23) - 1)) << 1; // 24 bits -> 6 hex digits
    if exp == 0 {
        format!("{sign}0x0.{mant:06x}p-126f")
    } else {
        format!("{sign}0x1.{mant:06x}p{:+}f", exp - 127)
    }
}

/// Emission inputs for one family.
pub struct EmitConfig {
    pub family: String,
    pub precision: Precision,
    pub tolerance: f64,
    pub seed: u64,
}

/// The emitted translation units, keyed by file name.
pub fn emit_family(config: &EmitConfig, kernels: &[KernelExec]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let fam = &config.family;
    out.insert(format!("{fam}_tensors.h"), emit_tensors_header(config, kernels));
    out.insert(format!("{fam}_tensors.c"), emit_tensors_source(config, kernels));
    out.insert(format!("{fam}_kernels.h"), emit_kernels_header(config, kernels));
    out.insert(format!("{fam}_kernels.c"), emit_kernels_source(config, kernels));
    out.insert(format!("{fam}_tests.c"), emit_tests(config, kernels));
    out
}

/// All distinct variables across the family's kernels, with the
/// defining `VarInfo` (identical across kernels by construction).
fn family_tensors<'a>(kernels: &'a [KernelExec]) -> BTreeMap<&'a str, &'a VarInfo> {
    let mut out: BTreeMap<&str, &VarInfo> = BTreeMap::new();
    for k in kernels {
        for (name, info) in &k.vars {
            if !info.is_temp {
                out.entry(name.as_str()).or_insert(info);
            }
        }
    }
    out
}

fn emit_tensors_header(config: &EmitConfig, kernels: &[KernelExec]) -> String {
    let fam = &config.family;
    let real = config.precision.ctype();
    let guard = format!("{}_TENSORS_H", fam.to_uppercase());
    let mut s = String::new();
    let _ = writeln!(s, "#ifndef {guard}\n#define {guard}\n");
    let _ = writeln!(s, "#include <stddef.h>\n");
    for (name, info) in family_tensors(kernels) {
        let _ = writeln!(s, "/* {}: shape {:?}, {} layout, {} stored elements */",
            name, info.shape, info.layout.variant_name(), info.stored_len());
        let _ = writeln!(s, "enum {{ {fam}_{name}_size = {} }};", info.stored_len());
        match &info.layout {
            MemoryLayout::DenseColMajor(bx) | MemoryLayout::BoundingBox(bx) => {
                let params: Vec<String> =
                    (0..bx.intervals().len()).map(|d| format!("long i{d}")).collect();
                let terms: Vec<String> = bx
                    .intervals()
                    .iter()
                    .zip(bx.strides())
                    .enumerate()
                    .map(|(d, (&(b, _), &t))| format!("(i{d} - {b}) * {t}"))
                    .collect();
                let _ = writeln!(
                    s,
                    "static inline long {fam}_{name}_index({}) {{ return {}; }}",
                    params.join(", "),
                    terms.join(" + ")
                );
            }
            MemoryLayout::Csc(c) => {
                let _ = writeln!(s, "extern const long {fam}_{name}_colptr[{}];", c.shape()[1] + 1);
                let _ = writeln!(s, "extern const long {fam}_{name}_rowidx[{}];", c.nnz().max(1));
            }
        }
        if info.constant.is_some() {
            let _ = writeln!(s, "extern const {real} {fam}_{name}[{}];", info.stored_len().max(1));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "#endif");
    s
}

fn emit_tensors_source(config: &EmitConfig, kernels: &[KernelExec]) -> String {
    let fam = &config.family;
    let real = config.precision.ctype();
    let mut s = String::new();
    let _ = writeln!(s, "#include \"{fam}_tensors.h\"\n");
    for (name, info) in family_tensors(kernels) {
        if let MemoryLayout::Csc(c) = &info.layout {
            let cols: Vec<String> = c.colptr().iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                s,
                "const long {fam}_{name}_colptr[{}] = {{{}}};",
                c.shape()[1] + 1,
                cols.join(", ")
            );
            let rows: Vec<String> = c.rowidx().iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                s,
                "const long {fam}_{name}_rowidx[{}] = {{{}}};",
                c.nnz().max(1),
                if rows.is_empty() { "0".to_owned() } else { rows.join(", ") }
            );
        }
        if let Some(values) = &info.constant {
            // Values are stored already formatted for the layout.
            let lits: Vec<String> =
                values.iter().map(|&v| config.precision.literal(v)).collect();
            let _ = writeln!(
                s,
                "const {real} {fam}_{name}[{}] = {{\n  {}\n}};",
                values.len().max(1),
                lits.join(", ")
            );
        }
    }
    s
}

fn kernel_struct_members(exec: &KernelExec) -> Vec<(String, bool)> {
    // (tensor name, written?) for every runtime slot.
    let outputs = exec.outputs();
    exec.slots()
        .into_iter()
        .map(|n| (n.to_owned(), outputs.iter().any(|o| o == n)))
        .collect()
}

fn emit_kernels_header(config: &EmitConfig, kernels: &[KernelExec]) -> String {
    let fam = &config.family;
    let real = config.precision.ctype();
    let guard = format!("{}_KERNELS_H", fam.to_uppercase());
    let mut s = String::new();
    let _ = writeln!(s, "#ifndef {guard}\n#define {guard}\n");
    let _ = writeln!(s, "#include \"{fam}_tensors.h\"\n");
    for k in kernels {
        let _ = writeln!(s, "/* kernel {} */", k.name);
        let _ = writeln!(
            s,
            "enum {{ {fam}_{0}_nonzero_flops = {1}, {fam}_{0}_hardware_flops = {2} }};",
            k.name, k.nonzero_flops, k.hardware_flops
        );
        let _ = writeln!(s, "typedef struct {{");
        for (name, written) in kernel_struct_members(k) {
            let qual = if written { "" } else { "const " };
            let _ = writeln!(s, "  {qual}{real}* {name};");
        }
        for sc in &k.scalars {
            let _ = writeln!(s, "  {real} {sc};");
        }
        let _ = writeln!(s, "}} {fam}_{}_t;", k.name);
        let _ = writeln!(s, "void {fam}_{}_execute({fam}_{}_t* k);\n", k.name, k.name);
    }
    let _ = writeln!(s, "#endif");
    s
}

/// Loop variable name for a letter.
fn lv(letter: Letter) -> String {
    format!("i_{}", letter as char)
}

/// Offset expression of an access under named loop variables.
fn offset_expr(access: &Access, loops: &[Loop]) -> String {
    let mut terms = vec![format!("{}", access.base)];
    for &(slot, stride) in &access.terms {
        terms.push(format!("(long){} * {stride}", lv(loops[slot].letter)));
    }
    terms.join(" + ")
}

/// Read expression with zero guards.
fn read_expr(access: &Access, loops: &[Loop], buf: &str, real: &str) -> String {
    let body = format!("{buf}[{}]", offset_expr(access, loops));
    if access.guards.is_empty() {
        return body;
    }
    let conds: Vec<String> = access
        .guards
        .iter()
        .map(|&(slot, lo, hi)| {
            let v = lv(loops[slot].letter);
            format!("{v} >= {lo} && {v} < {hi}")
        })
        .collect();
    format!("(({}) ? {body} : ({real})0)", conds.join(" && "))
}

fn alpha_expr(alpha: &ScalarCoeff, precision: Precision) -> String {
    let mut parts: Vec<String> = Vec::new();
    if alpha.literal != 1.0 || alpha.symbols.is_empty() {
        parts.push(precision.literal(alpha.literal));
    }
    for s in &alpha.symbols {
        parts.push(format!("k->{s}"));
    }
    parts.join(" * ")
}

fn open_loops(s: &mut String, indent: &mut String, loops: &[Loop]) {
    for l in loops {
        let v = lv(l.letter);
        let _ = writeln!(s, "{indent}for (long {v} = {}; {v} < {}; ++{v}) {{", l.lo, l.hi);
        indent.push_str("  ");
    }
}

fn close_loops(s: &mut String, indent: &mut String, n: usize) {
    for _ in 0..n {
        indent.truncate(indent.len() - 2);
        let _ = writeln!(s, "{indent}}}");
    }
}

/// Buffer/array expression for a variable inside a kernel body.
fn var_expr(config: &EmitConfig, exec: &KernelExec, name: &str) -> String {
    let info = &exec.vars[name];
    if info.is_temp {
        name.to_owned()
    } else if info.constant.is_some() {
        format!("{}_{name}", config.family)
    } else {
        format!("k->{name}")
    }
}

fn emit_step(
    s: &mut String,
    config: &EmitConfig,
    exec: &KernelExec,
    step: &Step,
) {
    let real = config.precision.ctype();
    let mut indent = String::from("  ");
    match step {
        Step::Zero { var, len } => {
            let buf = var_expr(config, exec, var);
            let _ = writeln!(
                s,
                "{indent}for (long z = 0; z < {len}; ++z) {buf}[z] = ({real})0;"
            );
        }
        Step::CopyScaleAdd { loops, dst, src, alpha, accumulate } => {
            open_loops(s, &mut indent, loops);
            let mut v = read_expr(src, loops, &var_expr(config, exec, &src.var), real);
            if !alpha.is_one() {
                v = format!("({}) * ({v})", alpha_expr(alpha, config.precision));
            }
            let op = if *accumulate { "+=" } else { "=" };
            let d = var_expr(config, exec, &dst.var);
            let _ = writeln!(s, "{indent}{d}[{}] {op} {v};", offset_expr(dst, loops));
            close_loops(s, &mut indent, loops.len());
        }
        Step::Product { loops, dst, a, b, alpha, accumulate } => {
            open_loops(s, &mut indent, loops);
            let mut v = format!(
                "{} * {}",
                read_expr(a, loops, &var_expr(config, exec, &a.var), real),
                read_expr(b, loops, &var_expr(config, exec, &b.var), real)
            );
            if !alpha.is_one() {
                v = format!("({}) * ({v})", alpha_expr(alpha, config.precision));
            }
            let op = if *accumulate { "+=" } else { "=" };
            let d = var_expr(config, exec, &dst.var);
            let _ = writeln!(s, "{indent}{d}[{}] {op} {v};", offset_expr(dst, loops));
            close_loops(s, &mut indent, loops.len());
        }
        Step::IndexSum { free, sum, dst, src, alpha, accumulate } => {
            let all: Vec<Loop> = free.iter().chain(sum.iter()).cloned().collect();
            open_loops(s, &mut indent, free);
            let _ = writeln!(s, "{indent}{real} acc = ({real})0;");
            open_loops(s, &mut indent, sum);
            let _ = writeln!(
                s,
                "{indent}acc += {};",
                read_expr(src, &all, &var_expr(config, exec, &src.var), real)
            );
            close_loops(s, &mut indent, sum.len());
            let mut v = String::from("acc");
            if !alpha.is_one() {
                v = format!("({}) * acc", alpha_expr(alpha, config.precision));
            }
            let op = if *accumulate { "+=" } else { "=" };
            let d = var_expr(config, exec, &dst.var);
            let _ = writeln!(s, "{indent}{d}[{}] {op} {v};", offset_expr(dst, free));
            close_loops(s, &mut indent, free.len());
        }
        Step::Gemm { batch, n, m, k, dst, a, b, alpha, accumulate, backend, prefetch } => {
            let _ = writeln!(s, "{indent}/* loop-over-gemm: backend {backend} */");
            if let Some(p) = prefetch {
                let _ = writeln!(s, "{indent}/* prefetch: {p} */");
            }
            let outer: Vec<Loop> =
                batch.iter().chain(n.iter()).chain(m.iter()).cloned().collect();
            let all: Vec<Loop> = outer.iter().chain(k.iter()).cloned().collect();
            open_loops(s, &mut indent, &outer);
            let d = var_expr(config, exec, &dst.var);
            let seed_from_dst = alpha.is_one() && *accumulate;
            if seed_from_dst {
                let _ = writeln!(s, "{indent}{real} acc = {d}[{}];", offset_expr(dst, &outer));
            } else {
                let _ = writeln!(s, "{indent}{real} acc = ({real})0;");
            }
            open_loops(s, &mut indent, k);
            let _ = writeln!(
                s,
                "{indent}acc += {} * {};",
                read_expr(a, &all, &var_expr(config, exec, &a.var), real),
                read_expr(b, &all, &var_expr(config, exec, &b.var), real)
            );
            close_loops(s, &mut indent, k.len());
            if alpha.is_one() {
                let _ = writeln!(s, "{indent}{d}[{}] = acc;", offset_expr(dst, &outer));
            } else {
                let v = format!("({}) * acc", alpha_expr(alpha, config.precision));
                let op = if *accumulate { "+=" } else { "=" };
                let _ = writeln!(s, "{indent}{d}[{}] {op} {v};", offset_expr(dst, &outer));
            }
            close_loops(s, &mut indent, outer.len());
        }
        Step::CscGemm { m, col, k_letter, row_range, dst, a, csc, alpha, accumulate, prefetch } => {
            let fam = &config.family;
            let _ = writeln!(s, "{indent}/* loop-over-gemm: backend csc */");
            if let Some(p) = prefetch {
                let _ = writeln!(s, "{indent}/* prefetch: {p} */");
            }
            // Loop slots: [col, m.., k(row)].
            let mut all: Vec<Loop> = vec![col.clone()];
            all.extend(m.iter().cloned());
            all.push(Loop { letter: *k_letter, lo: row_range.0, hi: row_range.1 });
            let k_letter = *k_letter;
            let dst_loops: Vec<Loop> = all[..1 + m.len()].to_vec();
            open_loops(s, &mut indent, &all[..1]);
            if !*accumulate {
                let mut zi = indent.clone();
                open_loops(s, &mut zi, m);
                let d = var_expr(config, exec, &dst.var);
                let _ = writeln!(
                    s,
                    "{zi}{d}[{}] = ({real})0;",
                    offset_expr(dst, &dst_loops)
                );
                close_loops(s, &mut zi, m.len());
            }
            let cv = lv(col.letter);
            let _ = writeln!(
                s,
                "{indent}for (long e = {fam}_{csc}_colptr[{cv}]; e < {fam}_{csc}_colptr[{cv} + 1]; ++e) {{"
            );
            indent.push_str("  ");
            let _ = writeln!(s, "{indent}long {} = {fam}_{csc}_rowidx[e];", lv(k_letter));
            let _ = writeln!(
                s,
                "{indent}if ({0} < {1} || {0} >= {2}) continue;",
                lv(k_letter),
                row_range.0,
                row_range.1
            );
            let vals = var_expr(config, exec, csc);
            let mut w = format!("{vals}[e]");
            if !alpha.is_one() {
                w = format!("{vals}[e] * ({})", alpha_expr(alpha, config.precision));
            }
            let _ = writeln!(s, "{indent}{real} w = {w};");
            open_loops(s, &mut indent, m);
            let d = var_expr(config, exec, &dst.var);
            let _ = writeln!(
                s,
                "{indent}{d}[{}] += {} * w;",
                offset_expr(dst, &dst_loops),
                read_expr(a, &all, &var_expr(config, exec, &a.var), real)
            );
            close_loops(s, &mut indent, m.len());
            indent.truncate(indent.len() - 2);
            let _ = writeln!(s, "{indent}}}");
            close_loops(s, &mut indent, 1);
        }
    }
}

fn emit_kernels_source(config: &EmitConfig, kernels: &[KernelExec]) -> String {
    let fam = &config.family;
    let real = config.precision.ctype();
    let mut s = String::new();
    let _ = writeln!(s, "#include \"{fam}_kernels.h\"\n");
    for exec in kernels {
        let _ = writeln!(s, "void {fam}_{}_execute({fam}_{}_t* k) {{", exec.name, exec.name);
        // Temporary buffers, shared per the greedy plan.
        if let Some(plan) = &exec.buffer_plan {
            for (i, size) in plan.sizes.iter().enumerate() {
                let _ = writeln!(s, "  {real} _b{i}[{}];", size.max(&1));
            }
            for (temp, buf) in &plan.assignment {
                let _ = writeln!(s, "  {real}* const {temp} = _b{buf};");
            }
        } else {
            for (name, info) in &exec.vars {
                if info.is_temp {
                    let _ = writeln!(s, "  {real} {name}[{}];", info.stored_len().max(1));
                }
            }
        }
        let _ = writeln!(s, "  (void)k;");
        for step in &exec.steps {
            emit_step(&mut s, config, exec, step);
        }
        let _ = writeln!(s, "}}\n");
    }
    s
}

/// Extents of the letters of an index string, resolved against the
/// family's tensors (used for naive reference loops).
fn letter_sizes(
    kernels: &[KernelExec],
    expr: &NaiveExpr,
    sizes: &mut BTreeMap<Letter, usize>,
) {
    match expr {
        NaiveExpr::Read { tensor, indices } => {
            for k in kernels {
                if let Some(info) = k.vars.get(tensor) {
                    for (d, &l) in indices.letters().iter().enumerate() {
                        sizes.insert(l, info.shape[d]);
                    }
                    return;
                }
            }
        }
        NaiveExpr::Scale { child, .. } => letter_sizes(kernels, child, sizes),
        NaiveExpr::Sum { children, .. } | NaiveExpr::Einsum { children, .. } => {
            for c in children {
                letter_sizes(kernels, c, sizes);
            }
        }
    }
}

struct NaiveEmitter<'a> {
    config: &'a EmitConfig,
    exec: &'a KernelExec,
    sizes: BTreeMap<Letter, usize>,
    counter: usize,
    decls: String,
    body: String,
}

impl NaiveEmitter<'_> {
    fn grid_len(&self, indices: &IndexString) -> usize {
        indices.letters().iter().map(|&l| self.sizes[&l]).product::<usize>().max(1)
    }

    /// Column-major offset expression of a grid over `indices`.
    fn grid_offset(&self, indices: &IndexString) -> String {
        let mut stride = 1usize;
        let mut terms = Vec::new();
        for &l in indices.letters() {
            terms.push(format!("(long){} * {stride}", lv(l)));
            stride *= self.sizes[&l];
        }
        if terms.is_empty() {
            "0".into()
        } else {
            terms.join(" + ")
        }
    }

    /// Emits evaluation of an expression into a fresh dense grid over
    /// its letters; returns the grid's C name.
    fn eval(&mut self, expr: &NaiveExpr) -> String {
        let real = self.config.precision.ctype();
        match expr {
            NaiveExpr::Read { tensor, .. } => format!("st_{tensor}"),
            NaiveExpr::Scale { alpha, child } => {
                let inner = self.eval(child);
                let name = format!("nv{}", self.counter);
                self.counter += 1;
                let len = self.grid_len(child.indices());
                let _ = writeln!(self.decls, "  {real} {name}[{len}];");
                let a = alpha_test_expr(alpha, self.config, &self.exec.name);
                let _ = writeln!(
                    self.body,
                    "  for (long z = 0; z < {len}; ++z) {name}[z] = ({a}) * {inner}[z];"
                );
                name
            }
            NaiveExpr::Sum { children, indices } => {
                let name = format!("nv{}", self.counter);
                self.counter += 1;
                let len = self.grid_len(indices);
                let _ = writeln!(self.decls, "  {real} {name}[{len}];");
                let _ = writeln!(
                    self.body,
                    "  for (long z = 0; z < {len}; ++z) {name}[z] = ({real})0;"
                );
                for c in children {
                    let cg = self.eval(c);
                    // Element-wise add with letter-mapped indexing.
                    let mut s = String::new();
                    let mut indent = String::from("  ");
                    for &l in indices.letters() {
                        let v = lv(l);
                        let _ = writeln!(
                            s,
                            "{indent}for (long {v} = 0; {v} < {}; ++{v}) {{",
                            self.sizes[&l]
                        );
                        indent.push_str("  ");
                    }
                    let _ = writeln!(
                        s,
                        "{indent}{name}[{}] += {cg}[{}];",
                        self.grid_offset(indices),
                        self.grid_offset(c.indices())
                    );
                    for _ in indices.letters() {
                        indent.truncate(indent.len() - 2);
                        let _ = writeln!(s, "{indent}}}");
                    }
                    self.body.push_str(&s);
                }
                name
            }
            NaiveExpr::Einsum { children, indices } => {
                let grids: Vec<String> = children.iter().map(|c| self.eval(c)).collect();
                let name = format!("nv{}", self.counter);
                self.counter += 1;
                let len = self.grid_len(indices);
                let real = self.config.precision.ctype();
                let _ = writeln!(self.decls, "  {real} {name}[{len}];");
                let _ = writeln!(
                    self.body,
                    "  for (long z = 0; z < {len}; ++z) {name}[z] = ({real})0;"
                );
                // Global letters: union of children letters, sorted.
                let mut letters: Vec<Letter> = Vec::new();
                for c in children {
                    for &l in c.indices().letters() {
                        if !letters.contains(&l) {
                            letters.push(l);
                        }
                    }
                }
                letters.sort_by_key(|&l| crate::index::letter_rank(l).unwrap());
                let mut s = String::new();
                let mut indent = String::from("  ");
                for &l in &letters {
                    let v = lv(l);
                    let _ = writeln!(
                        s,
                        "{indent}for (long {v} = 0; {v} < {}; ++{v}) {{",
                        self.sizes[&l]
                    );
                    indent.push_str("  ");
                }
                let product: Vec<String> = children
                    .iter()
                    .zip(&grids)
                    .map(|(c, g)| format!("{g}[{}]", self.grid_offset(c.indices())))
                    .collect();
                let _ = writeln!(
                    s,
                    "{indent}{name}[{}] += {};",
                    self.grid_offset(indices),
                    product.join(" * ")
                );
                for _ in &letters {
                    indent.truncate(indent.len() - 2);
                    let _ = writeln!(s, "{indent}}}");
                }
                self.body.push_str(&s);
                name
            }
        }
    }
}

/// Alpha expression inside tests: scalars come from local variables
/// `sc_<name>` rather than a kernel struct.
fn alpha_test_expr(alpha: &ScalarCoeff, config: &EmitConfig, _kernel: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    if alpha.literal != 1.0 || alpha.symbols.is_empty() {
        parts.push(config.precision.literal(alpha.literal));
    }
    for s in &alpha.symbols {
        parts.push(format!("sc_{s}"));
    }
    parts.join(" * ")
}

fn emit_tests(config: &EmitConfig, kernels: &[KernelExec]) -> String {
    let fam = &config.family;
    let _real = config.precision.ctype();
    let mut s = String::new();
    let _ = writeln!(s, "#include <stdio.h>");
    let _ = writeln!(s, "#include <string.h>");
    let _ = writeln!(s, "#include <math.h>");
    let _ = writeln!(s, "#include <stdint.h>");
    let _ = writeln!(s, "#include \"{fam}_kernels.h\"\n");
    // The seeded generator; identical to the host-side sequence.
    let _ = writeln!(
        s,
        "static uint64_t sm64(uint64_t* st) {{\n  *st += 0x9E3779B97F4A7C15ULL;\n  uint64_t z = *st;\n  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;\n  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;\n  return z ^ (z >> 31);\n}}"
    );
    match config.precision {
        Precision::F64 => {
            let _ = writeln!(
                s,
                "static double rnd(uint64_t* st) {{ return (double)(sm64(st) >> 11) * (1.0 / 9007199254740992.0); }}\n"
            );
        }
        Precision::F32 => {
            let _ = writeln!(
                s,
                "static float rnd(uint64_t* st) {{ return (float)(sm64(st) >> 40) * (1.0f / 16777216.0f); }}\n"
            );
        }
    }

    for exec in kernels {
        emit_kernel_test(&mut s, config, exec);
    }

    let _ = writeln!(s, "int main(int argc, char** argv) {{");
    let _ = writeln!(
        s,
        "  int dump = argc > 1 && strcmp(argv[1], \"--dump\") == 0;\n  int fails = 0;"
    );
    for exec in kernels {
        let _ = writeln!(s, "  fails += test_{}(dump);", exec.name);
    }
    let _ = writeln!(s, "  return fails;\n}}");
    s
}

fn emit_kernel_test(s: &mut String, config: &EmitConfig, exec: &KernelExec) {
    let fam = &config.family;
    let real = config.precision.ctype();
    let name = &exec.name;
    let _ = writeln!(s, "static int test_{name}(int dump) {{");

    // Runtime tensor storage, filled with pattern-respecting seeded
    // values (random consumed only for in-shape, in-pattern slots).
    let slots = kernel_struct_members(exec);
    for (tensor, _) in &slots {
        let info = &exec.vars[tensor.as_str()];
        let _ = writeln!(s, "  {real} buf_{tensor}[{}];", info.stored_len().max(1));
        emit_fill(s, config, exec, tensor);
    }
    // Scalars.
    for sc in &exec.scalars {
        let v = super::scalar_fill(config.seed, name, sc);
        let _ = writeln!(s, "  const {real} sc_{sc} = {};", config.precision.literal(v));
    }

    // Dense state grids for every variable the reference path reads or
    // writes, initialised from the fills (or constants).
    let mut dense_vars: Vec<&str> = Vec::new();
    for st in &exec.naive {
        collect_reads(&st.expr, &mut dense_vars);
        if !dense_vars.contains(&st.target.as_str()) {
            dense_vars.push(&st.target);
        }
    }
    for var in &dense_vars {
        emit_densify(s, config, exec, var);
    }

    // Reference evaluation, statement by statement, through the dense
    // state.
    let mut sizes = BTreeMap::new();
    for st in &exec.naive {
        letter_sizes(core::slice::from_ref(exec), &st.expr, &mut sizes);
        let info = &exec.vars[&st.target];
        for (d, &l) in st.target_indices.letters().iter().enumerate() {
            sizes.insert(l, info.shape[d]);
        }
    }
    let mut ne = NaiveEmitter {
        config,
        exec,
        sizes,
        counter: 0,
        decls: String::new(),
        body: String::new(),
    };
    let mut stmts = String::new();
    for st in &exec.naive {
        let grid = ne.eval(&st.expr);
        let target_len = ne.grid_len(&st.target_indices);
        // The expression grid is ordered by its own letters; map onto
        // the target's letter order.
        let mut body = String::new();
        let mut indent = String::from("  ");
        for &l in st.target_indices.letters() {
            let v = lv(l);
            let _ = writeln!(body, "{indent}for (long {v} = 0; {v} < {}; ++{v}) {{", ne.sizes[&l]);
            indent.push_str("  ");
        }
        let op = if st.accumulate { "+=" } else { "=" };
        let _ = writeln!(
            body,
            "{indent}st_{}[{}] {op} {grid}[{}];",
            st.target,
            ne.grid_offset(&st.target_indices),
            ne.grid_offset(st.expr.indices())
        );
        for _ in st.target_indices.letters() {
            indent.truncate(indent.len() - 2);
            let _ = writeln!(body, "{indent}}}");
        }
        let _ = target_len;
        stmts.push_str(&ne.body);
        ne.body = String::new();
        stmts.push_str(&body);
    }
    s.push_str(&ne.decls);
    s.push_str(&stmts);

    // Optimised execution.
    let _ = writeln!(s, "  {fam}_{name}_t k;");
    for (tensor, _) in &slots {
        let _ = writeln!(s, "  k.{tensor} = buf_{tensor};");
    }
    for sc in &exec.scalars {
        let _ = writeln!(s, "  k.{sc} = sc_{sc};");
    }
    let _ = writeln!(s, "  {fam}_{name}_execute(&k);");

    // Compare outputs: relative Frobenius distance over the dense view.
    let _ = writeln!(s, "  double num = 0.0, den = 0.0;");
    for out in exec.outputs() {
        emit_readback_compare(s, config, exec, &out);
    }
    let _ = writeln!(
        s,
        "  double rel = den > 0.0 ? sqrt(num / den) : sqrt(num);\n  int ok = rel <= {:e};",
        config.tolerance
    );
    let _ = writeln!(
        s,
        "  printf(\"%s {name} rel=%.3e\\n\", ok ? \"PASS\" : \"FAIL\", rel);"
    );
    // Bit dump of output storage for cross-checking against the
    // interpreter.
    let _ = writeln!(s, "  if (dump) {{");
    for out in exec.outputs() {
        let info = &exec.vars[&out];
        let width = config.precision.width() * 2;
        let bits_ty = match config.precision {
            Precision::F64 => "uint64_t",
            Precision::F32 => "uint32_t",
        };
        let _ = writeln!(s, "    for (long z = 0; z < {}; ++z) {{", info.stored_len());
        let _ = writeln!(
            s,
            "      {bits_ty} bits; memcpy(&bits, &buf_{out}[z], sizeof bits);"
        );
        let _ = writeln!(
            s,
            "      printf(\"{name} {out} %ld %0{width}llx\\n\", z, (unsigned long long)bits);"
        );
        let _ = writeln!(s, "    }}");
    }
    let _ = writeln!(s, "  }}");
    let _ = writeln!(s, "  return ok ? 0 : 1;\n}}\n");
}

fn collect_reads<'a>(expr: &'a NaiveExpr, out: &mut Vec<&'a str>) {
    match expr {
        NaiveExpr::Read { tensor, .. } => {
            if !out.contains(&tensor.as_str()) {
                out.push(tensor);
            }
        }
        NaiveExpr::Scale { child, .. } => collect_reads(child, out),
        NaiveExpr::Sum { children, .. } | NaiveExpr::Einsum { children, .. } => {
            for c in children {
                collect_reads(c, out);
            }
        }
    }
}

/// Emits the seeded pattern-respecting fill of one tensor's storage.
fn emit_fill(s: &mut String, config: &EmitConfig, exec: &KernelExec, tensor: &str) {
    let info = &exec.vars[tensor];
    let seed = super::fill_seed(config.seed, &exec.name, tensor);
    match &info.layout {
        MemoryLayout::DenseColMajor(bx) | MemoryLayout::BoundingBox(bx) => {
            // Pattern bitmap over the shape, column-major.
            let shape_len: usize = info.shape.iter().product();
            let mut bits = vec![0u8; shape_len.div_ceil(8)];
            let mut off = 0usize;
            crate::index::for_each_point(&info.shape, |p| {
                if info.spp.get(p) {
                    bits[off / 8] |= 1 << (off % 8);
                }
                off += 1;
            });
            let lits: Vec<String> = bits.iter().map(|b| format!("{b}")).collect();
            let _ = writeln!(
                s,
                "  {{\n    static const unsigned char spp[] = {{{}}};",
                lits.join(",")
            );
            let _ = writeln!(s, "    uint64_t st = {seed}ULL;");
            let _ = writeln!(
                s,
                "    for (long off = 0; off < {}; ++off) {{",
                bx.element_count().max(1)
            );
            // Decode the storage offset into a shape index.
            let _ = writeln!(s, "      long rem = off; long idx[{}]; int inside = 1;", info.shape.len());
            for (d, (&(b, up), &n)) in bx.intervals().iter().zip(&info.shape).enumerate() {
                let len = up - b;
                let _ = writeln!(
                    s,
                    "      idx[{d}] = {b} + rem % {len}; rem /= {len}; inside = inside && idx[{d}] < {n};"
                );
            }
            let mut shape_off = String::from("0");
            let mut stride = 1usize;
            for (d, &n) in info.shape.iter().enumerate() {
                shape_off = format!("{shape_off} + idx[{d}] * {stride}");
                stride *= n;
            }
            let _ = writeln!(s, "      long so = {shape_off};");
            let _ = writeln!(
                s,
                "      int nz = inside && (spp[so >> 3] >> (so & 7) & 1);"
            );
            let _ = writeln!(
                s,
                "      buf_{tensor}[off] = nz ? rnd(&st) : ({})0;",
                config.precision.ctype()
            );
            let _ = writeln!(s, "    }}\n  }}");
        }
        MemoryLayout::Csc(c) => {
            let _ = writeln!(s, "  {{\n    uint64_t st = {seed}ULL;");
            let _ = writeln!(
                s,
                "    for (long e = 0; e < {}; ++e) buf_{tensor}[e] = rnd(&st);",
                c.nnz().max(1)
            );
            let _ = writeln!(s, "  }}");
        }
    }
}

/// Emits densification of a variable into `st_<name>` (the reference
/// state grid over the tensor's shape).
fn emit_densify(s: &mut String, config: &EmitConfig, exec: &KernelExec, tensor: &str) {
    let real = config.precision.ctype();
    let info = &exec.vars[tensor];
    let shape_len: usize = info.shape.iter().product();
    let src = if info.constant.is_some() {
        format!("{}_{tensor}", config.family)
    } else {
        format!("buf_{tensor}")
    };
    let _ = writeln!(s, "  {real} st_{tensor}[{}];", shape_len.max(1));
    match &info.layout {
        MemoryLayout::DenseColMajor(bx) | MemoryLayout::BoundingBox(bx) => {
            let _ = writeln!(s, "  {{");
            let _ = writeln!(s, "    long rem, inbox;");
            let _ = writeln!(s, "    for (long so = 0; so < {shape_len}; ++so) {{");
            let _ = writeln!(s, "      rem = so; inbox = 1; long addr = 0;");
            let mut stride_terms = Vec::new();
            for (d, (&(b, up), &n)) in bx.intervals().iter().zip(&info.shape).enumerate() {
                let _ = writeln!(
                    s,
                    "      long i{d} = rem % {n}; rem /= {n}; inbox = inbox && i{d} >= {b} && i{d} < {up};"
                );
                stride_terms.push(format!("(i{d} - {b}) * {}", bx.strides()[d]));
            }
            let _ = writeln!(s, "      if (inbox) addr = {};", stride_terms.join(" + "));
            let _ = writeln!(
                s,
                "      st_{tensor}[so] = inbox ? {src}[addr] : ({real})0;"
            );
            let _ = writeln!(s, "    }}\n  }}");
        }
        MemoryLayout::Csc(c) => {
            let fam = &config.family;
            let rows = c.shape()[0];
            let _ = writeln!(
                s,
                "  for (long so = 0; so < {shape_len}; ++so) st_{tensor}[so] = ({real})0;"
            );
            let _ = writeln!(s, "  for (long c = 0; c < {}; ++c)", c.shape()[1]);
            let _ = writeln!(
                s,
                "    for (long e = {fam}_{tensor}_colptr[c]; e < {fam}_{tensor}_colptr[c + 1]; ++e)"
            );
            let _ = writeln!(
                s,
                "      st_{tensor}[{fam}_{tensor}_rowidx[e] + c * {rows}] = {src}[e];"
            );
        }
    }
}

/// Emits the Frobenius comparison of the optimised output (read back
/// through its layout) against the dense reference state.
fn emit_readback_compare(s: &mut String, config: &EmitConfig, exec: &KernelExec, tensor: &str) {
    let real = config.precision.ctype();
    let info = &exec.vars[tensor];
    let shape_len: usize = info.shape.iter().product();
    let bx = info.layout.as_box().expect("outputs use box layouts");
    let _ = writeln!(s, "  {{");
    let _ = writeln!(s, "    for (long so = 0; so < {shape_len}; ++so) {{");
    let _ = writeln!(s, "      long rem = so; long inbox = 1; long addr = 0;");
    let mut stride_terms = Vec::new();
    for (d, (&(b, up), &n)) in bx.intervals().iter().zip(&info.shape).enumerate() {
        let _ = writeln!(
            s,
            "      long i{d} = rem % {n}; rem /= {n}; inbox = inbox && i{d} >= {b} && i{d} < {up};"
        );
        stride_terms.push(format!("(i{d} - {b}) * {}", bx.strides()[d]));
    }
    let _ = writeln!(s, "      if (inbox) addr = {};", stride_terms.join(" + "));
    let _ = writeln!(
        s,
        "      {real} got = inbox ? buf_{tensor}[addr] : ({real})0;"
    );
    let _ = writeln!(s, "      double d = (double)got - (double)st_{tensor}[so];");
    let _ = writeln!(
        s,
        "      num += d * d; den += (double)st_{tensor}[so] * (double)st_{tensor}[so];"
    );
    let _ = writeln!(s, "    }}\n  }}");
}
