//! The compilation pipeline: shaping, sparsity analysis, strength
//! reduction, layouts, contraction mapping, straight-line optimisation,
//! planning, and emission.

use std::collections::BTreeMap;

use anyhow::{anyhow, Result};
use einkern_core::ast::{
    deduce_indices, propagate_patterns, validate_family, Diagnostic, Family, Node, NodeKind,
    Statement,
};
use einkern_core::cfg::{self, CfgProgram};
use einkern_core::codegen::c99::{emit_family, EmitConfig, Precision};
use einkern_core::codegen::{
    self, default_backends, naive_spec, BackendSpec, KernelExec, NaiveExpr, NaiveStatement,
};
use einkern_core::index::IndexString;
use einkern_core::layout::{assign_layout, LayoutPolicy};
use einkern_core::logmap::{self, MapperEnv};
use einkern_core::pattern::SparsityPattern;
use einkern_core::strength;
use einkern_core::tensor::Tensor;

/// Desk-scale caps: tensors stay small by assumption.
const MAX_TENSOR_ELEMENTS: usize = 1 << 20;
const MAX_EINSUM_OPERANDS: usize = 7;

/// What to emit after compilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitKind {
    C99,
    None,
}

/// Pipeline settings; the defaults produce a runnable portable build.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub precision: Precision,
    /// SIMD vector width in elements; 1 means no padding.
    pub alignment: usize,
    pub backend_order: Vec<String>,
    pub emit: EmitKind,
    pub seed: u64,
    /// Density below which an eligible constant matrix goes CSC.
    pub csc_density: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            precision: Precision::F64,
            alignment: 1,
            backend_order: vec!["csc".into(), "gemm".into(), "copy".into(), "loops".into()],
            emit: EmitKind::C99,
            seed: 20240915,
            csc_density: 0.4,
        }
    }
}

impl PipelineConfig {
    pub fn tolerance(&self) -> f64 {
        match self.precision {
            Precision::F64 => 1e-12,
            Precision::F32 => 1e-5,
        }
    }

    fn backends(&self) -> Vec<BackendSpec> {
        self.backend_order
            .iter()
            .map(|name| match name.as_str() {
                "csc" | "gemm" | "copy" | "loops" => BackendSpec::portable(name),
                other => BackendSpec::vendor(other),
            })
            .chain(default_backends())
            .collect()
    }
}

/// Compilation failure: user-level diagnostics or an internal error.
#[derive(Debug)]
pub enum CompileError {
    Diagnostics(Vec<Diagnostic>),
    Internal(anyhow::Error),
}

impl std::fmt::Display for CompileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CompileError::Diagnostics(ds) => {
                for d in ds {
                    writeln!(f, "{d}")?;
                }
                Ok(())
            }
            CompileError::Internal(e) => write!(f, "internal error: {e}"),
        }
    }
}

impl std::error::Error for CompileError {}

impl From<anyhow::Error> for CompileError {
    fn from(e: anyhow::Error) -> Self {
        CompileError::Internal(e)
    }
}

/// One compiled kernel with everything the report and the tests need.
pub struct CompiledKernel {
    pub name: String,
    pub exec: KernelExec,
    /// The lowered program before any pass.
    pub initial_program: CfgProgram,
    /// The optimized program.
    pub program: CfgProgram,
    /// Chosen loop-over-GEMM descriptors: (notation, cost tuple).
    pub descriptors: Vec<(String, String)>,
    pub prefetch: Vec<String>,
    /// The statements with their mapped trees, kept for verification.
    pub mapped: Vec<(Statement, Node)>,
    pub naive: Vec<NaiveStatement>,
    pub dense_hardware_flops: u64,
}

/// A compiled family plus emitted artifacts and the report.
pub struct CompiledFamily {
    pub family: Family,
    pub kernels: Vec<CompiledKernel>,
    pub warnings: Vec<Diagnostic>,
    pub emitted: BTreeMap<String, String>,
    pub report: serde_json::Value,
}

/// Resolves the layout policy of every declared tensor: explicit
/// requests win; otherwise constant low-density matrices that are only
/// ever contracted from the right go CSC (unless previously demoted),
/// and everything else gets an aligned bounding box of its declared
/// pattern. Returns the resolved family and the ladder's CSC picks.
fn resolve_layouts(
    family: &Family,
    config: &PipelineConfig,
    demoted: &[String],
) -> Result<(Family, Vec<String>), CompileError> {
    let mut diagnostics = Vec::new();
    let mut right_operand_only: BTreeMap<String, bool> = BTreeMap::new();
    for t in family.tensors.keys() {
        right_operand_only.insert(t.clone(), true);
    }
    for k in &family.kernels {
        for stmt in &k.statements {
            right_operand_only.insert(stmt.target.clone(), false);
            let target = stmt.target_indices.clone();
            stmt.expr.walk(&mut |n| {
                if let NodeKind::Leaf { tensor } = &n.kind {
                    let letters = n.indices.letters();
                    // Right GEMM operand shape: first index contracted,
                    // second free in the target.
                    let qualifies = letters.len() == 2
                        && !target.contains(letters[0])
                        && target.contains(letters[1]);
                    if !qualifies {
                        if let Some(flag) = right_operand_only.get_mut(tensor.as_str()) {
                            *flag = false;
                        }
                    }
                }
            });
        }
    }
    let mut out = family.clone();
    let mut ladder_csc = Vec::new();
    for (name, tensor) in &family.tensors {
        let policy = match family.layout_requests.get(name) {
            Some(p) => *p,
            None => {
                let density = tensor.spp().nnz() as f64 / tensor.element_count() as f64;
                let csc_ok = tensor.values().is_some()
                    && tensor.rank() == 2
                    && density < config.csc_density
                    && right_operand_only.get(name.as_str()).copied().unwrap_or(false)
                    && !demoted.contains(name);
                if csc_ok {
                    ladder_csc.push(name.clone());
                    LayoutPolicy::Csc
                } else {
                    LayoutPolicy::Aligned(config.alignment)
                }
            }
        };
        match assign_layout(tensor.shape(), tensor.spp(), policy) {
            Ok(layout) => {
                let t = tensor.clone().with_layout(layout);
                out.tensors.insert(name.clone(), t);
            }
            Err(e) => diagnostics.push(Diagnostic {
                code: "layout",
                message: format!("tensor '{name}': {e}"),
            }),
        }
    }
    if diagnostics.is_empty() {
        Ok((out, ladder_csc))
    } else {
        Err(CompileError::Diagnostics(diagnostics))
    }
}

/// Rewrites every Einsum node into its operation-minimal formula tree,
/// returning the kernel-level non-zero flop count: minimal schedule
/// costs plus the scalar multiplications and merged additions implied
/// by the surrounding nodes.
fn reduce_tree(node: Node) -> Result<(Node, u64), CompileError> {
    match node.kind {
        NodeKind::Leaf { .. } => Ok((node, 0)),
        NodeKind::ScalarMul { coeff, child } => {
            let (child, mut nz) = reduce_tree(*child)?;
            if !coeff.is_one() {
                nz += child.effective_spp().map(|p| p.nnz()).unwrap_or(0);
            }
            Ok((
                Node {
                    kind: NodeKind::ScalarMul { coeff, child: Box::new(child) },
                    indices: node.indices,
                    spp: node.spp,
                    eqspp: node.eqspp,
                },
                nz,
            ))
        }
        NodeKind::Permute { child } => {
            let (child, nz) = reduce_tree(*child)?;
            Ok((
                Node {
                    kind: NodeKind::Permute { child: Box::new(child) },
                    indices: node.indices,
                    spp: node.spp,
                    eqspp: node.eqspp,
                },
                nz,
            ))
        }
        NodeKind::Add { children } => {
            let indices = node.indices.clone();
            let aligned: Vec<SparsityPattern> =
                children.iter().map(|c| align_to(c, &indices)).collect();
            let mut reduced = Vec::with_capacity(children.len());
            let mut nz = 0u64;
            for c in children {
                let (c, cnz) = reduce_tree(c)?;
                nz += cnz;
                reduced.push(c);
            }
            // Point-wise additions under no cancellation: one add per
            // extra nonzero contribution at a point.
            if let Some(first) = aligned.first() {
                for off in 0..first.len() {
                    let cnt = aligned.iter().filter(|p| p.get_linear(off)).count() as u64;
                    nz += cnt.saturating_sub(1);
                }
            }
            Ok((
                Node {
                    kind: NodeKind::Add { children: reduced },
                    indices: node.indices,
                    spp: node.spp,
                    eqspp: node.eqspp,
                },
                nz,
            ))
        }
        NodeKind::Einsum { children } => {
            if children.len() > MAX_EINSUM_OPERANDS {
                return Err(CompileError::Diagnostics(vec![Diagnostic {
                    code: "einsum-operands",
                    message: format!(
                        "einsum with {} operands exceeds the supported {}",
                        children.len(),
                        MAX_EINSUM_OPERANDS
                    ),
                }]));
            }
            let mut reduced_children = Vec::with_capacity(children.len());
            let mut nz = 0u64;
            for c in children {
                let (c, cnz) = reduce_tree(c)?;
                nz += cnz;
                reduced_children.push(c);
            }
            let ops: Vec<(&Node, &SparsityPattern)> = reduced_children
                .iter()
                .map(|c| (c, c.effective_spp().expect("patterns are propagated")))
                .collect();
            let reduction = strength::reduce(&ops, &node.indices)
                .map_err(|e| CompileError::Internal(anyhow!("strength reduction: {e}")))?;
            nz += reduction.schedule.cost;
            let mut tree = reduction.tree;
            // The einsum's masked result pattern is authoritative.
            tree.spp = node.spp.clone();
            Ok((tree, nz))
        }
        other => {
            Ok((Node { kind: other, indices: node.indices, spp: node.spp, eqspp: node.eqspp }, 0))
        }
    }
}

fn align_to(child: &Node, order: &IndexString) -> SparsityPattern {
    let spp = child.effective_spp().expect("patterns are propagated");
    if child.indices == *order {
        return spp.clone();
    }
    let perm: Vec<usize> =
        order.letters().iter().map(|&l| child.indices.position(l).unwrap()).collect();
    spp.permuted(&perm)
}

fn collect_descriptors(node: &Node, out: &mut Vec<(String, String)>) {
    if let NodeKind::Contraction { left, right, log: Some(desc), .. } = &node.kind {
        let label = |n: &Node| match &n.kind {
            NodeKind::Leaf { tensor } => tensor.clone(),
            _ => format!("tmp[{}]", n.indices),
        };
        let cost = desc.cost();
        out.push((
            desc.notation("res", &label(left), &label(right)),
            format!("(s={}, l={}, r={}, -f=-{})", cost.s, cost.l, cost.r, cost.f),
        ));
    }
    for c in node.children() {
        collect_descriptors(c, out);
    }
}

/// Compiles one family end to end. When a statement has no feasible
/// loop-over-GEMM mapping because a ladder-chosen CSC operand would
/// need batching, the operand is demoted to a dense box layout with a
/// diagnostic and compilation retries.
pub fn compile_family(
    family: &Family,
    config: &PipelineConfig,
) -> Result<CompiledFamily, CompileError> {
    let diags = validate_family(family);
    if !diags.is_empty() {
        return Err(CompileError::Diagnostics(diags));
    }
    for (name, t) in &family.tensors {
        if t.element_count() > MAX_TENSOR_ELEMENTS {
            return Err(CompileError::Diagnostics(vec![Diagnostic {
                code: "tensor-size",
                message: format!("tensor '{name}' exceeds the supported element count"),
            }]));
        }
    }
    let backends = config.backends();
    let mut demoted: Vec<String> = Vec::new();
    let mut warnings: Vec<Diagnostic> = Vec::new();
    let (family, kernels) = 'attempt: loop {
        let (family, ladder_csc) = resolve_layouts(family, config, &demoted)?;
        let mut kernels = Vec::new();
        for kernel in &family.kernels {
            let mut mapped: Vec<(Statement, Node)> = Vec::new();
            let mut naive: Vec<NaiveStatement> = Vec::new();
            let mut nonzero = 0u64;
            for stmt in &kernel.statements {
                let mut expr = stmt.desugared_expr();
                deduce_indices(&mut expr, &stmt.target_indices, &family.tensors)
                    .map_err(|e| CompileError::Internal(anyhow!("index deduction: {e}")))?;
                propagate_patterns(&mut expr, &family.tensors)
                    .map_err(|e| CompileError::Internal(anyhow!("sparsity analysis: {e}")))?;
                naive.push(NaiveStatement {
                    target: stmt.target.clone(),
                    target_indices: stmt.target_indices.clone(),
                    // The desugared form already folds `+=` into an Add.
                    accumulate: false,
                    expr: naive_spec(&expr),
                });
                let (reduced, nz) = reduce_tree(expr)?;
                nonzero += nz;
                let mut tree = logmap::find_contractions(reduced);
                let env =
                    MapperEnv { tensors: &family.tensors, temp_alignment: config.alignment };
                let outcome = logmap::optimize_permutations(
                    &mut tree,
                    &stmt.target,
                    &stmt.target_indices,
                    &env,
                );
                if let Err(e) = outcome {
                    // CSC operands cannot be batched; demote the
                    // ladder's picks used by this statement and retry.
                    let mut offenders: Vec<String> = Vec::new();
                    stmt.expr.walk(&mut |n| {
                        if let NodeKind::Leaf { tensor } = &n.kind {
                            if ladder_csc.contains(tensor) && !offenders.contains(tensor) {
                                offenders.push(tensor.clone());
                            }
                        }
                    });
                    if offenders.is_empty() {
                        return Err(CompileError::Diagnostics(vec![Diagnostic {
                            code: "log-mapping",
                            message: format!("kernel '{}': {e}", kernel.name),
                        }]));
                    }
                    for t in offenders {
                        warnings.push(Diagnostic {
                            code: "csc-demoted",
                            message: format!(
                                "tensor '{t}': compressed-sparse-column storage has no mapping inside batched loops; using a dense box layout"
                            ),
                        });
                        demoted.push(t);
                    }
                    continue 'attempt;
                }
                mapped.push((stmt.clone(), tree));
            }
            // Prefetch assignment over the mapped trees.
            {
                let mut roots: Vec<&mut Node> = mapped.iter_mut().map(|(_, n)| n).collect();
                let ds = logmap::assign_prefetch(
                    &mut roots,
                    &kernel.prefetch,
                    &family.tensors,
                    config.precision.width(),
                );
                warnings.extend(ds);
            }
            let mut descriptors = Vec::new();
            for (_, tree) in &mapped {
                collect_descriptors(tree, &mut descriptors);
            }
            let initial_program = cfg::lower(&mapped, config.alignment);
            let mut program = initial_program.clone();
            cfg::run_passes(&mut program);
            let exec = codegen::plan_kernel(
                &kernel.name,
                &program,
                &family.tensors,
                &backends,
                nonzero,
                naive.clone(),
            )
            .map_err(|e| {
                CompileError::Internal(anyhow!("planning kernel '{}': {e}", kernel.name))
            })?;
            kernels.push(CompiledKernel {
                name: kernel.name.clone(),
                exec,
                initial_program,
                program,
                descriptors,
                prefetch: kernel.prefetch.clone(),
                mapped,
                naive,
                dense_hardware_flops: 0,
            });
        }
        break (family, kernels);
    };
    let mut kernels = kernels;

    // Dense-pattern baseline for the flop report: same shapes and
    // explicit layout requests (CSC dropped), every pattern dense.
    let dense_flops = dense_baseline(&family, config)?;
    for k in &mut kernels {
        if let Some(&f) = dense_flops.get(&k.name) {
            k.dense_hardware_flops = f;
        }
    }

    let emitted = match config.emit {
        EmitKind::C99 => {
            let execs: Vec<KernelExec> = kernels.iter().map(|k| k.exec.clone()).collect();
            emit_family(
                &EmitConfig {
                    family: family.name.clone(),
                    precision: config.precision,
                    tolerance: config.tolerance(),
                    seed: config.seed,
                },
                &execs,
            )
        }
        EmitKind::None => BTreeMap::new(),
    };

    let report = crate::report::build(&family, &kernels, &warnings, config);
    Ok(CompiledFamily { family, kernels, warnings, emitted, report })
}

/// Hardware flops of the same kernels with every pattern dense.
fn dense_baseline(
    family: &Family,
    config: &PipelineConfig,
) -> Result<BTreeMap<String, u64>, CompileError> {
    let mut dense = Family::new(&family.name);
    dense.scalars = family.scalars.clone();
    dense.kernels = family.kernels.clone();
    for (name, t) in &family.tensors {
        let fresh = Tensor::new(name, t.shape())
            .map_err(|e| CompileError::Internal(anyhow!("baseline tensor: {e}")))?;
        dense.tensors.insert(name.clone(), fresh);
    }
    for (name, policy) in &family.layout_requests {
        if !matches!(policy, LayoutPolicy::Csc) {
            dense.layout_requests.insert(name.clone(), *policy);
        }
    }
    let mut cfg_dense = config.clone();
    cfg_dense.emit = EmitKind::None;
    let (family, _) = resolve_layouts(&dense, &cfg_dense, &[])?;
    let backends = cfg_dense.backends();
    let mut out = BTreeMap::new();
    for kernel in &family.kernels {
        let mut mapped: Vec<(Statement, Node)> = Vec::new();
        for stmt in &kernel.statements {
            let mut expr = stmt.desugared_expr();
            deduce_indices(&mut expr, &stmt.target_indices, &family.tensors)
                .map_err(|e| CompileError::Internal(anyhow!("{e}")))?;
            propagate_patterns(&mut expr, &family.tensors)
                .map_err(|e| CompileError::Internal(anyhow!("{e}")))?;
            let (reduced, _) = reduce_tree(expr)?;
            let mut tree = logmap::find_contractions(reduced);
            let env = MapperEnv { tensors: &family.tensors, temp_alignment: cfg_dense.alignment };
            logmap::optimize_permutations(&mut tree, &stmt.target, &stmt.target_indices, &env)
                .map_err(|e| CompileError::Internal(anyhow!("{e}")))?;
            mapped.push((stmt.clone(), tree));
        }
        let mut program = cfg::lower(&mapped, cfg_dense.alignment);
        cfg::run_passes(&mut program);
        let exec =
            codegen::plan_kernel(&kernel.name, &program, &family.tensors, &backends, 0, vec![])
                .map_err(|e| CompileError::Internal(anyhow!("{e}")))?;
        out.insert(kernel.name.clone(), exec.hardware_flops);
    }
    Ok(out)
}

/// Outcome of one generated correctness check run under the
/// interpreter.
pub struct TestOutcome {
    pub kernel: String,
    pub relative_error: f64,
    pub tally: u64,
    pub passed: bool,
}

/// Runs the generated unit test of one kernel under the interpreter:
/// seeded pattern-respecting fills, the naive reference path, the
/// optimized execution, and a relative Frobenius comparison.
pub fn run_generated_test(
    compiled: &CompiledKernel,
    family: &Family,
    config: &PipelineConfig,
) -> Result<TestOutcome> {
    use einkern_core::codegen::interp::{execute, Instance};
    let exec = &compiled.exec;
    let mut inst: Instance<f64> = Instance::new(exec);
    // Dense reference state per variable, chained through statements.
    let mut state: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let names: Vec<String> = exec
        .vars
        .iter()
        .filter(|(_, v)| !v.is_temp)
        .map(|(n, _)| n.clone())
        .collect();
    for tensor in &names {
        let info = &exec.vars[tensor];
        if info.constant.is_none() {
            let storage: Vec<f64> =
                codegen::fill_storage(info, codegen::fill_seed(config.seed, &exec.name, tensor));
            inst.bind_storage(exec, tensor, storage)?;
        }
        state.insert(tensor.clone(), inst.read_dense(exec, tensor)?);
    }
    let mut scalars = BTreeMap::new();
    for s in &exec.scalars {
        let v = codegen::scalar_fill(config.seed, &exec.name, s);
        scalars.insert(s.clone(), v);
        inst.scalars.insert(s.clone(), v);
    }

    // Reference path.
    for st in &compiled.naive {
        let (shape, grid) = eval_naive(&st.expr, &state, &scalars, family)?;
        let grid =
            einkern_core::ast::permute_grid(&grid, &shape, st.expr.indices(), &st.target_indices);
        let entry = state.get_mut(&st.target).unwrap();
        if st.accumulate {
            for (a, b) in entry.iter_mut().zip(grid) {
                *a += b;
            }
        } else {
            *entry = grid;
        }
    }

    let tally = execute(exec, &mut inst)?;
    // Frobenius over all outputs.
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for out in exec.outputs() {
        let got = inst.read_dense(exec, &out)?;
        let want = &state[&out];
        for (g, w) in got.iter().zip(want) {
            num += (g - w) * (g - w);
            den += w * w;
        }
    }
    let relative_error = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok(TestOutcome {
        kernel: exec.name.clone(),
        relative_error,
        tally,
        passed: relative_error <= config.tolerance(),
    })
}

/// Evaluates a reference expression over dense state grids; returns
/// (shape over the expr's letters, grid).
fn eval_naive(
    expr: &NaiveExpr,
    state: &BTreeMap<String, Vec<f64>>,
    scalars: &BTreeMap<String, f64>,
    family: &Family,
) -> Result<(Vec<usize>, Vec<f64>)> {
    use einkern_core::tensor::naive_einsum;
    match expr {
        NaiveExpr::Read { tensor, .. } => {
            let shape = family.tensors[tensor].shape().to_vec();
            let grid = state
                .get(tensor)
                .cloned()
                .or_else(|| family.tensors[tensor].values().map(|v| v.to_vec()))
                .ok_or_else(|| anyhow!("no state for '{tensor}'"))?;
            Ok((shape, grid))
        }
        NaiveExpr::Scale { alpha, child } => {
            let (shape, mut grid) = eval_naive(child, state, scalars, family)?;
            let v =
                alpha.resolve(scalars).ok_or_else(|| anyhow!("unbound scalar in '{alpha}'"))?;
            for x in &mut grid {
                *x *= v;
            }
            Ok((shape, grid))
        }
        NaiveExpr::Sum { children, indices } => {
            let mut acc: Option<Vec<f64>> = None;
            let mut shape = Vec::new();
            for c in children {
                let (cshape, cgrid) = eval_naive(c, state, scalars, family)?;
                let aligned =
                    einkern_core::ast::permute_grid(&cgrid, &cshape, c.indices(), indices);
                shape = indices
                    .letters()
                    .iter()
                    .map(|&l| cshape[c.indices().position(l).unwrap()])
                    .collect();
                match &mut acc {
                    None => acc = Some(aligned),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(aligned) {
                            *x += y;
                        }
                    }
                }
            }
            Ok((shape, acc.expect("sum has children")))
        }
        NaiveExpr::Einsum { children, indices } => {
            let parts: Vec<(Vec<usize>, Vec<f64>)> = children
                .iter()
                .map(|c| eval_naive(c, state, scalars, family))
                .collect::<Result<_>>()?;
            let ops: Vec<(&IndexString, &[usize], &[f64])> = children
                .iter()
                .zip(&parts)
                .map(|(c, (s, g))| (c.indices(), s.as_slice(), g.as_slice()))
                .collect();
            let out = naive_einsum(indices, &ops)?;
            let space = einkern_core::build_index_space(
                &children
                    .iter()
                    .zip(&parts)
                    .map(|(c, (s, _))| (s.as_slice(), c.indices()))
                    .collect::<Vec<_>>(),
            )?;
            Ok((space.extents_of(indices), out))
        }
    }
}

/// Compiles a family and runs every kernel's generated correctness
/// check under the interpreter.
pub fn verify_family(family: &Family, config: &PipelineConfig) -> Result<Vec<TestOutcome>> {
    let compiled = compile_family(family, config).map_err(|e| anyhow!("{e}"))?;
    let mut out = Vec::new();
    for k in &compiled.kernels {
        out.push(run_generated_test(k, &compiled.family, config)?);
    }
    Ok(out)
}
