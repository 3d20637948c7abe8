//! Executable artifacts: operation classification, backend selection,
//! execution planning, and flop accounting.
//!
//! Every optimized action is planned into a [`Step`]: a concrete loop
//! nest with resolved affine addressing. The interpreter executes steps
//! directly and the C emitter prints the same loops, so both produce
//! bit-identical results in double precision by construction.
//!
//! Flop conventions (hardware flops count executed operations):
//! - loop-over-GEMM: 2 per multiply-accumulate, i.e. `2 M N K` per
//!   batch iteration, padded zeros included. With a unit multiplier the
//!   accumulation seeds from the destination, so `2 M N K` covers the
//!   update; a non-unit multiplier adds its epilogue operations.
//! - CSC GEMM: `2 * nnz-in-range * M`, plus one multiply per stored
//!   entry for a non-unit multiplier.
//! - copyscaleadd and the generic product/index-sum loops: loop-body
//!   executions times the body's operation count (multiplier and
//!   accumulation included; a plain copy performs no flops).

pub mod c99;
pub mod interp;

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::ast::ScalarCoeff;
use crate::cfg::{Action, CfgProgram, Rhs, VarRef};
use crate::index::{IndexString, Letter};
use crate::layout::MemoryLayout;
use crate::pattern::SparsityPattern;
use crate::tensor::Tensor;

/// The four operation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperationKind {
    CopyScaleAdd,
    IndexSum,
    Product,
    Log,
}

impl OperationKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperationKind::CopyScaleAdd => "copyscaleadd",
            OperationKind::IndexSum => "indexsum",
            OperationKind::Product => "product",
            OperationKind::Log => "log",
        }
    }
}

/// Classifies an action by its right-hand side.
pub fn classify(action: &Action) -> OperationKind {
    match &action.rhs {
        Rhs::Var(_) => OperationKind::CopyScaleAdd,
        Rhs::Log { .. } => OperationKind::Log,
        Rhs::Product { .. } => OperationKind::Product,
        Rhs::IndexSum { .. } => OperationKind::IndexSum,
    }
}

/// A code-generator entry of the backend factory. Vendor generators
/// are representable (with a size predicate for preference lists) but
/// report themselves unavailable; the portable backends implement
/// everything.
#[derive(Debug, Clone)]
pub struct BackendSpec {
    pub name: String,
    /// Minimum and maximum GEMM M extent this entry prefers; checked
    /// only for log operations.
    pub m_range: (usize, usize),
    pub available: bool,
}

impl BackendSpec {
    pub fn portable(name: &str) -> Self {
        BackendSpec { name: name.to_owned(), m_range: (0, usize::MAX), available: true }
    }

    pub fn vendor(name: &str) -> Self {
        BackendSpec { name: name.to_owned(), m_range: (0, usize::MAX), available: false }
    }

    fn supports(&self, kind: OperationKind, action: &Action) -> bool {
        if !self.available {
            return false;
        }
        match (self.name.as_str(), kind) {
            ("csc", OperationKind::Log) => {
                matches!(&action.rhs, Rhs::Log { desc, .. }
                    if desc.csc_b && desc.m_extent() >= self.m_range.0 && desc.m_extent() <= self.m_range.1)
            }
            ("gemm", OperationKind::Log) => {
                matches!(&action.rhs, Rhs::Log { desc, .. }
                    if !desc.csc_b && desc.m_extent() >= self.m_range.0 && desc.m_extent() <= self.m_range.1)
            }
            ("copy", OperationKind::CopyScaleAdd) => true,
            // The generic nested-loop fallback covers every kind.
            ("loops", _) => true,
            _ => false,
        }
    }
}

/// The default priority list: CSC where applicable, then the portable
/// scalar GEMM, then the generic fallbacks.
pub fn default_backends() -> Vec<BackendSpec> {
    vec![
        BackendSpec::portable("csc"),
        BackendSpec::portable("gemm"),
        BackendSpec::portable("copy"),
        BackendSpec::portable("loops"),
    ]
}

/// Returns the highest-priority backend that supports the action; the
/// generic fallback always exists, so every classified action receives
/// a backend.
pub fn backend_factory<'a>(order: &'a [BackendSpec], action: &Action) -> &'a BackendSpec {
    let kind = classify(action);
    order
        .iter()
        .find(|b| b.supports(kind, action))
        .expect("a generic fallback backend must be present in the priority list")
}

/// Errors raised while planning or executing kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecError {
    UnboundSlot { name: String },
    UnknownVariable { name: String },
    /// A CSC operand appeared in a position the backends cannot map.
    CscPlacement { name: String },
    ShapeMismatch { name: String, expected: usize, got: usize },
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecError::UnboundSlot { name } => write!(f, "tensor slot '{name}' is not bound"),
            ExecError::UnknownVariable { name } => write!(f, "unknown variable '{name}'"),
            ExecError::CscPlacement { name } => {
                write!(f, "CSC tensor '{name}' used outside a dense x sparse GEMM")
            }
            ExecError::ShapeMismatch { name, expected, got } => {
                write!(f, "binding for '{name}' has {got} elements, expected {expected}")
            }
        }
    }
}

impl core::error::Error for ExecError {}

/// Storage facts about one variable of a kernel.
#[derive(Debug, Clone)]
pub struct VarInfo {
    pub shape: Vec<usize>,
    pub layout: MemoryLayout,
    pub spp: SparsityPattern,
    /// Layout-formatted values for compile-time tensors.
    pub constant: Option<Vec<f64>>,
    pub is_temp: bool,
}

impl VarInfo {
    pub fn stored_len(&self) -> usize {
        self.layout.element_count()
    }
}

/// One loop dimension of a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub letter: Letter,
    pub lo: usize,
    pub hi: usize,
}

impl Loop {
    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Affine access into a variable's storage: `base + sum loopvar*stride`,
/// with optional per-loop guards that read zero outside an interval.
#[derive(Debug, Clone)]
pub struct Access {
    pub var: String,
    pub base: i64,
    /// `(loop slot, stride)` pairs; slots index the step's loop list.
    pub terms: Vec<(usize, i64)>,
    /// `(loop slot, lo, hi)`: outside `[lo, hi)` the read yields zero.
    pub guards: Vec<(usize, usize, usize)>,
}

impl Access {
    pub fn offset(&self, ivs: &[usize]) -> Option<usize> {
        for &(slot, lo, hi) in &self.guards {
            if ivs[slot] < lo || ivs[slot] >= hi {
                return None;
            }
        }
        let mut off = self.base;
        for &(slot, stride) in &self.terms {
            off += ivs[slot] as i64 * stride;
        }
        Some(usize::try_from(off).expect("in-box addresses are nonnegative"))
    }
}

/// The scaling applied to a step: a literal times bound scalars.
pub type Alpha = ScalarCoeff;

/// One planned execution step. Loop lists are ordered outermost first;
/// loop slots in accesses index the concatenated loop list of the step.
#[derive(Debug, Clone)]
pub enum Step {
    /// Zero-fill a variable's entire stored box.
    Zero { var: String, len: usize },
    /// `dst (+)= alpha * src` element-wise over the dst box.
    CopyScaleAdd { loops: Vec<Loop>, dst: Access, src: Access, alpha: Alpha, accumulate: bool },
    /// `dst (+)= alpha * a * b` element-wise over the dst box.
    Product {
        loops: Vec<Loop>,
        dst: Access,
        a: Access,
        b: Access,
        alpha: Alpha,
        accumulate: bool,
    },
    /// `dst (+)= alpha * sum src` with the sum loops innermost.
    IndexSum {
        free: Vec<Loop>,
        sum: Vec<Loop>,
        dst: Access,
        src: Access,
        alpha: Alpha,
        accumulate: bool,
    },
    /// Loop-over-GEMM: loops are batch ++ n ++ m ++ k (k innermost
    /// accumulating).
    Gemm {
        batch: Vec<Loop>,
        n: Vec<Loop>,
        m: Vec<Loop>,
        k: Vec<Loop>,
        dst: Access,
        a: Access,
        b: Access,
        alpha: Alpha,
        accumulate: bool,
        /// Backend label for reports and emitted comments.
        backend: String,
        prefetch: Option<String>,
    },
    /// Dense x CSC GEMM: per column, iterate stored entries.
    CscGemm {
        m: Vec<Loop>,
        /// Column loop (single letter).
        col: Loop,
        /// The contracted (row) letter.
        k_letter: Letter,
        /// Row filter: stored entries outside are skipped.
        row_range: (usize, usize),
        dst: Access,
        a: Access,
        /// The CSC-stored variable supplying the B operand.
        csc: String,
        alpha: Alpha,
        accumulate: bool,
        prefetch: Option<String>,
    },
}

/// Everything needed to execute or emit one kernel.
#[derive(Debug, Clone)]
pub struct KernelExec {
    pub name: String,
    pub steps: Vec<Step>,
    pub vars: BTreeMap<String, VarInfo>,
    /// Symbolic scalar slots the kernel reads.
    pub scalars: Vec<String>,
    pub nonzero_flops: u64,
    pub hardware_flops: u64,
    /// Per-action summaries for the report.
    pub action_summaries: Vec<String>,
    /// Greedy temp-to-buffer map used by emitted code.
    pub buffer_plan: Option<crate::cfg::BufferPlan>,
    /// Reference semantics for generated unit tests: the statements as
    /// written, before any optimisation.
    pub naive: Vec<NaiveStatement>,
}

/// One statement of the unoptimised reference path.
#[derive(Debug, Clone)]
pub struct NaiveStatement {
    pub target: String,
    pub target_indices: IndexString,
    pub accumulate: bool,
    pub expr: NaiveExpr,
}

/// Reference expression shapes; evaluation is the direct Einstein-sum
/// semantics over dense grids.
#[derive(Debug, Clone)]
pub enum NaiveExpr {
    Read { tensor: String, indices: IndexString },
    Scale { alpha: ScalarCoeff, child: alloc::boxed::Box<NaiveExpr> },
    /// Element-wise sum; children may use permuted letter orders.
    Sum { children: Vec<NaiveExpr>, indices: IndexString },
    /// Full Einstein sum over the children with the given result order.
    Einsum { children: Vec<NaiveExpr>, indices: IndexString },
}

impl NaiveExpr {
    pub fn indices(&self) -> &IndexString {
        match self {
            NaiveExpr::Read { indices, .. }
            | NaiveExpr::Sum { indices, .. }
            | NaiveExpr::Einsum { indices, .. } => indices,
            NaiveExpr::Scale { child, .. } => child.indices(),
        }
    }
}

/// Converts a deduced (un-reduced) expression tree into the reference
/// form used by generated tests.
pub fn naive_spec(node: &crate::ast::Node) -> NaiveExpr {
    use crate::ast::NodeKind;
    match &node.kind {
        NodeKind::Leaf { tensor } => {
            NaiveExpr::Read { tensor: tensor.clone(), indices: node.indices.clone() }
        }
        NodeKind::ScalarMul { coeff, child } => NaiveExpr::Scale {
            alpha: coeff.clone(),
            child: alloc::boxed::Box::new(naive_spec(child)),
        },
        NodeKind::Permute { child } => naive_spec(child),
        NodeKind::Add { children } => NaiveExpr::Sum {
            children: children.iter().map(naive_spec).collect(),
            indices: node.indices.clone(),
        },
        NodeKind::Einsum { children } => NaiveExpr::Einsum {
            children: children.iter().map(naive_spec).collect(),
            indices: node.indices.clone(),
        },
        other => unreachable!("reference specs are built before reduction: {other:?}"),
    }
}

impl KernelExec {
    /// Names of non-constant tensors the kernel reads or writes.
    pub fn slots(&self) -> Vec<&str> {
        self.vars
            .iter()
            .filter(|(_, v)| !v.is_temp && v.constant.is_none())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Names of tensors the kernel writes.
    pub fn outputs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.steps {
            let dst = match s {
                Step::Zero { var, .. } => var,
                Step::CopyScaleAdd { dst, .. }
                | Step::Product { dst, .. }
                | Step::IndexSum { dst, .. }
                | Step::Gemm { dst, .. }
                | Step::CscGemm { dst, .. } => &dst.var,
            };
            if !self.vars[dst].is_temp && !out.contains(dst) {
                out.push(dst.clone());
            }
        }
        out
    }
}

/// Formats a tensor's dense column-major values into layout storage.
/// Padded slots are zero.
pub fn format_values(tensor: &Tensor, layout: &MemoryLayout) -> Vec<f64> {
    let values = tensor.values().expect("constant tensors carry values");
    match layout {
        MemoryLayout::DenseColMajor(b) | MemoryLayout::BoundingBox(b) => {
            let mut out = vec![0.0; b.element_count()];
            let mut index = vec![0usize; tensor.rank()];
            for (off, slot) in out.iter_mut().enumerate() {
                decode_box_offset(b, off, &mut index);
                if index.iter().zip(tensor.shape()).all(|(&i, &n)| i < n) {
                    *slot = values[crate::index::colmajor_offset(tensor.shape(), &index)];
                }
            }
            out
        }
        MemoryLayout::Csc(c) => {
            let mut out = vec![0.0; c.nnz()];
            for col in 0..c.shape()[1] {
                for e in c.colptr()[col]..c.colptr()[col + 1] {
                    let row = c.rowidx()[e];
                    out[e] = values[crate::index::colmajor_offset(tensor.shape(), &[row, col])];
                }
            }
            out
        }
    }
}

/// Decodes a linear storage offset of a box layout into a multi-index.
pub fn decode_box_offset(layout: &crate::layout::BoxLayout, off: usize, index: &mut [usize]) {
    let mut rem = off;
    for (d, &(b, up)) in layout.intervals().iter().enumerate() {
        let len = up - b;
        index[d] = b + rem % len;
        rem /= len;
    }
}

struct Planner<'a> {
    vars: &'a BTreeMap<String, VarInfo>,
}

impl Planner<'_> {
    fn info(&self, name: &str) -> Result<&VarInfo, ExecError> {
        self.vars.get(name).ok_or_else(|| ExecError::UnknownVariable { name: name.to_owned() })
    }

    fn stored_interval(&self, r: &VarRef, letter: Letter) -> Result<(usize, usize), ExecError> {
        let info = self.info(&r.name)?;
        let d = r.indices.position(letter).expect("reference labels its dims");
        Ok(match &info.layout {
            MemoryLayout::Csc(c) => (0, c.shape()[d]),
            l => l.as_box().map(|b| b.intervals()[d]).unwrap(),
        })
    }

    fn support_interval(&self, r: &VarRef, letter: Letter) -> Result<(usize, usize), ExecError> {
        let info = self.info(&r.name)?;
        let d = r.indices.position(letter).expect("reference labels its dims");
        Ok(info.spp.bounding_box()[d])
    }

    /// Builds the affine access of a reference under the step's loops.
    /// Guards are added for dims whose loop range exceeds the stored
    /// interval (reads outside yield zero).
    fn access(
        &self,
        r: &VarRef,
        loops: &[Loop],
        guarded: bool,
    ) -> Result<Access, ExecError> {
        let info = self.info(&r.name)?;
        let (MemoryLayout::DenseColMajor(bx) | MemoryLayout::BoundingBox(bx)) = &info.layout
        else {
            return Err(ExecError::CscPlacement { name: r.name.clone() });
        };
        let mut base: i64 = 0;
        let mut terms = Vec::new();
        let mut guards = Vec::new();
        for (d, &letter) in r.indices.letters().iter().enumerate() {
            let (b, up) = bx.intervals()[d];
            let t = bx.strides()[d] as i64;
            base -= (b as i64) * t;
            let slot = loops
                .iter()
                .position(|l| l.letter == letter)
                .unwrap_or_else(|| panic!("letter {} missing from step loops", letter as char));
            terms.push((slot, t));
            let lr = &loops[slot];
            if lr.lo < b || lr.hi > up {
                if !guarded {
                    return Err(ExecError::ShapeMismatch {
                        name: r.name.clone(),
                        expected: up,
                        got: lr.hi,
                    });
                }
                guards.push((slot, b, up));
            }
        }
        Ok(Access { var: r.name.clone(), base, terms, guards })
    }

    /// Loop list over a destination's stored box, outermost = last dim.
    fn dst_loops(&self, dst: &VarRef) -> Result<Vec<Loop>, ExecError> {
        let info = self.info(&dst.name)?;
        let bx = info.layout.as_box().expect("destinations use box layouts");
        Ok(dst
            .indices
            .letters()
            .iter()
            .enumerate()
            .rev()
            .map(|(d, &letter)| {
                let (lo, hi) = bx.intervals()[d];
                Loop { letter, lo, hi }
            })
            .collect())
    }
}

fn to_loops(ranges: &[crate::logmap::LoopRange]) -> Vec<Loop> {
    ranges.iter().map(|r| Loop { letter: r.letter, lo: r.lo, hi: r.hi }).collect()
}

fn intersect(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let lo = a.0.max(b.0);
    (lo, a.1.min(b.1).max(lo))
}

/// Plans one optimized action into steps (a zero-fill plus the main
/// loop nest when an assign writes only part of the destination box).
fn plan_action(
    planner: &Planner,
    action: &Action,
    backends: &[BackendSpec],
) -> Result<Vec<Step>, ExecError> {
    let mut steps = Vec::new();
    match &action.rhs {
        Rhs::Var(src) => {
            let loops = planner.dst_loops(&action.dst)?;
            let dst = planner.access(&action.dst, &loops, false)?;
            let src_access = planner.access(src, &loops, true)?;
            steps.push(Step::CopyScaleAdd {
                loops,
                dst,
                src: src_access,
                alpha: action.alpha.clone(),
                accumulate: action.accumulate,
            });
        }
        Rhs::Product { left, right } => {
            let loops = planner.dst_loops(&action.dst)?;
            let dst = planner.access(&action.dst, &loops, false)?;
            let a = planner.access(left, &loops, true)?;
            let b = planner.access(right, &loops, true)?;
            steps.push(Step::Product {
                loops,
                dst,
                a,
                b,
                alpha: action.alpha.clone(),
                accumulate: action.accumulate,
            });
        }
        Rhs::IndexSum { letters, child } => {
            let free = planner.dst_loops(&action.dst)?;
            let mut sum = Vec::new();
            for &letter in letters {
                let stored = planner.stored_interval(child, letter)?;
                let support = planner.support_interval(child, letter)?;
                let (lo, hi) = intersect(stored, support);
                sum.push(Loop { letter, lo, hi });
            }
            let all: Vec<Loop> = free.iter().chain(sum.iter()).cloned().collect();
            let dst = planner.access(&action.dst, &free, false)?;
            let src = planner.access(child, &all, true)?;
            steps.push(Step::IndexSum {
                free,
                sum,
                dst,
                src,
                alpha: action.alpha.clone(),
                accumulate: action.accumulate,
            });
        }
        Rhs::Log { desc, left, right } => {
            let (a_ref, b_ref) = if desc.a_is_left { (left, right) } else { (right, left) };
            // Re-derive M/N/batch ranges against the actual destination
            // (action merging may have widened it); K ranges keep the
            // mapper's equivalent-sparsity intersection.
            let range_of = |group: &[crate::logmap::LoopRange],
                            other: &VarRef|
             -> Result<Vec<Loop>, ExecError> {
                let mut out = Vec::new();
                for (i, r) in group.iter().enumerate() {
                    let dst_iv = planner.stored_interval(&action.dst, r.letter)?;
                    let op_iv = planner.stored_interval(other, r.letter)?;
                    let (lo, hi) = if i + 1 == group.len() {
                        intersect(dst_iv, op_iv)
                    } else {
                        // Fused non-last dims stay full.
                        dst_iv
                    };
                    out.push(Loop { letter: r.letter, lo, hi });
                }
                Ok(out)
            };
            let m = range_of(&desc.m, a_ref)?;
            let n = range_of(&desc.n, b_ref)?;
            let k = to_loops(&desc.k);
            let mut batch = Vec::new();
            for r in &desc.batch {
                let mut iv = planner.stored_interval(&action.dst, r.letter)?;
                for side in [a_ref, b_ref] {
                    if side.indices.contains(r.letter) {
                        iv = intersect(iv, planner.stored_interval(side, r.letter)?);
                    }
                }
                batch.push(Loop { letter: r.letter, lo: iv.0, hi: iv.1 });
            }
            // An assign that writes only part of the destination box
            // needs the box cleared first.
            if !action.accumulate {
                let info = planner.info(&action.dst.name)?;
                let bx = info.layout.as_box().expect("GEMM destinations use box layouts");
                let written: BTreeMap<Letter, (usize, usize)> = m
                    .iter()
                    .chain(n.iter())
                    .chain(batch.iter())
                    .map(|l| (l.letter, (l.lo, l.hi)))
                    .collect();
                let partial = action.dst.indices.letters().iter().enumerate().any(|(d, &l)| {
                    written.get(&l).map(|&iv| iv != bx.intervals()[d]).unwrap_or(true)
                });
                if partial {
                    steps.push(Step::Zero {
                        var: action.dst.name.clone(),
                        len: bx.element_count(),
                    });
                }
            }
            let backend = backend_factory(backends, action).name.clone();
            if desc.csc_b {
                // Loop slots: [col, m.., k]; the step zeroes its own
                // written region when assigning.
                let all: Vec<Loop> = {
                    let mut v = vec![n[0].clone()];
                    v.extend(m.iter().cloned());
                    v.push(k[0].clone());
                    v
                };
                let dst_loops: Vec<Loop> = {
                    let mut v = vec![n[0].clone()];
                    v.extend(m.iter().cloned());
                    v
                };
                let dst = planner.access(&action.dst, &dst_loops, false)?;
                let a = planner.access(a_ref, &all, false)?;
                steps.push(Step::CscGemm {
                    m,
                    col: n[0].clone(),
                    k_letter: k[0].letter,
                    row_range: (k[0].lo, k[0].hi),
                    dst,
                    a,
                    csc: b_ref.name.clone(),
                    alpha: action.alpha.clone(),
                    accumulate: action.accumulate,
                    prefetch: desc.prefetch.clone(),
                });
            } else {
                let all: Vec<Loop> = batch
                    .iter()
                    .chain(n.iter())
                    .chain(m.iter())
                    .chain(k.iter())
                    .cloned()
                    .collect();
                let dst_loops: Vec<Loop> =
                    batch.iter().chain(n.iter()).chain(m.iter()).cloned().collect();
                let dst = planner.access(&action.dst, &dst_loops, false)?;
                let a = planner.access(a_ref, &all, false)?;
                let b = planner.access(b_ref, &all, false)?;
                steps.push(Step::Gemm {
                    batch,
                    n,
                    m,
                    k,
                    dst,
                    a,
                    b,
                    alpha: action.alpha.clone(),
                    accumulate: action.accumulate,
                    backend,
                    prefetch: desc.prefetch.clone(),
                });
            }
        }
    }
    Ok(steps)
}

/// Hardware flops of one step under the documented conventions.
pub fn step_flops(step: &Step) -> u64 {
    let prod = |ls: &[Loop]| ls.iter().map(|l| l.len() as u64).product::<u64>();
    match step {
        Step::Zero { .. } => 0,
        Step::CopyScaleAdd { loops, alpha, accumulate, .. } => {
            let body = u64::from(!alpha.is_one()) + u64::from(*accumulate);
            prod(loops) * body
        }
        Step::Product { loops, alpha, accumulate, .. } => {
            let body = 1 + u64::from(!alpha.is_one()) + u64::from(*accumulate);
            prod(loops) * body
        }
        Step::IndexSum { free, sum, alpha, accumulate, .. } => {
            let epilogue = u64::from(!alpha.is_one()) + u64::from(*accumulate);
            prod(free) * (prod(sum) + epilogue)
        }
        Step::Gemm { batch, m, n, k, alpha, accumulate, .. } => {
            // With a unit multiplier the accumulation seeds from the
            // destination, so the k-chain covers the update.
            let epilogue = if alpha.is_one() {
                0
            } else {
                1 + u64::from(*accumulate)
            };
            prod(batch) * prod(m) * prod(n) * (2 * prod(k) + epilogue)
        }
        Step::CscGemm { .. } => {
            // Depends on the stored pattern; counted by the caller that
            // has access to the CSC layout.
            0
        }
    }
}

/// Hardware flops of a whole plan; CSC steps need the variable table.
pub fn plan_flops(steps: &[Step], vars: &BTreeMap<String, VarInfo>) -> u64 {
    let mut total = 0u64;
    for s in steps {
        total += match s {
            Step::CscGemm { m, col, row_range, csc, alpha, .. } => {
                let layout = &vars[csc].layout;
                let c = layout.as_csc().expect("csc step reads a csc layout");
                let mut entries = 0u64;
                for column in col.lo..col.hi {
                    for e in c.colptr()[column]..c.colptr()[column + 1] {
                        let row = c.rowidx()[e];
                        if row >= row_range.0 && row < row_range.1 {
                            entries += 1;
                        }
                    }
                }
                let m_len = m.iter().map(|l| l.len() as u64).product::<u64>();
                entries * (2 * m_len + u64::from(!alpha.is_one()))
            }
            other => step_flops(other),
        };
    }
    total
}

/// Plans a whole optimized program into a kernel executable.
pub fn plan_kernel(
    name: &str,
    program: &CfgProgram,
    tensors: &BTreeMap<String, Tensor>,
    backends: &[BackendSpec],
    nonzero_flops: u64,
    naive: Vec<NaiveStatement>,
) -> Result<KernelExec, ExecError> {
    let mut vars: BTreeMap<String, VarInfo> = BTreeMap::new();
    let mut scalars: Vec<String> = Vec::new();
    for a in &program.actions {
        for s in &a.alpha.symbols {
            if !scalars.contains(s) {
                scalars.push(s.clone());
            }
        }
        let mut add_var = |r: &VarRef| {
            if vars.contains_key(&r.name) {
                return;
            }
            if let Some(t) = program.temps.get(&r.name) {
                vars.insert(
                    r.name.clone(),
                    VarInfo {
                        shape: t.spp.extents().to_vec(),
                        layout: t.layout.clone(),
                        spp: t.spp.clone(),
                        constant: None,
                        is_temp: true,
                    },
                );
            } else if let Some(t) = tensors.get(&r.name) {
                let layout = t.layout().expect("declared tensors carry layouts").clone();
                let constant = t.values().map(|_| format_values(t, &layout));
                vars.insert(
                    r.name.clone(),
                    VarInfo {
                        shape: t.shape().to_vec(),
                        layout,
                        spp: t.spp().clone(),
                        constant,
                        is_temp: false,
                    },
                );
            }
        };
        add_var(&a.dst);
        for r in a.rhs.reads() {
            add_var(r);
        }
    }
    scalars.sort();

    let planner = Planner { vars: &vars };
    let mut steps = Vec::new();
    let mut summaries = Vec::new();
    for a in &program.actions {
        let planned = plan_action(&planner, a, backends)?;
        let backend = backend_factory(backends, a).name.clone();
        summaries.push(format!(
            "{} [{}/{}]",
            one_line(a),
            classify(a).name(),
            backend
        ));
        steps.extend(planned);
    }
    let hardware_flops = plan_flops(&steps, &vars);
    Ok(KernelExec {
        name: name.to_owned(),
        steps,
        vars,
        scalars,
        nonzero_flops,
        hardware_flops,
        action_summaries: summaries,
        buffer_plan: program.buffers.clone(),
        naive,
    })
}

fn one_line(a: &Action) -> String {
    let mut p = CfgProgram { actions: vec![a.clone()], ..Default::default() };
    p.temps = BTreeMap::new();
    let s = p.dump();
    s.trim_end().to_owned()
}

/// The splitmix64 generator used for all seeded fills; the emitted C
/// tests implement the identical sequence.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to derive per-tensor fill seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform double in [0, 1) from one generator output; the C tests use
/// the same expression.
pub fn unit_f64(z: u64) -> f64 {
    (z >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Uniform float in [0, 1).
pub fn unit_f32(z: u64) -> f32 {
    (z >> 40) as f32 * (1.0 / 16777216.0)
}

/// Fills a variable's storage with seeded random values respecting its
/// sparsity pattern: storage offsets are visited in order and a random
/// number is consumed only for in-shape, in-pattern slots. Returns the
/// layout-formatted buffer; the draw happens in the working precision,
/// matching the emitted C tests.
pub fn fill_storage<F: interp::Real>(info: &VarInfo, seed: u64) -> Vec<F> {
    let mut state = seed;
    match &info.layout {
        MemoryLayout::DenseColMajor(bx) | MemoryLayout::BoundingBox(bx) => {
            let mut out = vec![F::ZERO; bx.element_count()];
            let mut index = vec![0usize; info.shape.len()];
            for (off, slot) in out.iter_mut().enumerate() {
                decode_box_offset(bx, off, &mut index);
                let inside = index.iter().zip(&info.shape).all(|(&i, &n)| i < n);
                if inside && info.spp.get(&index) {
                    *slot = F::unit(splitmix64(&mut state));
                }
            }
            out
        }
        MemoryLayout::Csc(c) => {
            let mut out = vec![F::ZERO; c.nnz()];
            for v in &mut out {
                *v = F::unit(splitmix64(&mut state));
            }
            out
        }
    }
}

/// Per-(kernel, tensor) fill seed.
pub fn fill_seed(seed: u64, kernel: &str, tensor: &str) -> u64 {
    seed ^ fnv1a(kernel.as_bytes()) ^ fnv1a(tensor.as_bytes()).rotate_left(17)
}

/// Per-(kernel, scalar) fill value in [0.5, 1.5).
pub fn scalar_fill(seed: u64, kernel: &str, scalar: &str) -> f64 {
    let mut s = fill_seed(seed, kernel, scalar) ^ 0x5ca1ab1e;
    0.5 + unit_f64(splitmix64(&mut s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::ScalarCoeff;
    use crate::layout::{assign_layout, LayoutPolicy};

    fn action_copy(alpha: f64) -> Action {
        Action {
            dst: VarRef { name: "B".into(), indices: IndexString::new("ij").unwrap() },
            accumulate: false,
            alpha: ScalarCoeff::literal(alpha),
            rhs: Rhs::Var(VarRef { name: "A".into(), indices: IndexString::new("ij").unwrap() }),
        }
    }

    #[test]
    fn classify_covers_all_kinds() {
        // B = 2 A (same letters) is a copyscaleadd.
        assert_eq!(classify(&action_copy(2.0)), OperationKind::CopyScaleAdd);
        let product = Action {
            dst: VarRef { name: "Q".into(), indices: IndexString::new("xz").unwrap() },
            accumulate: true,
            alpha: ScalarCoeff::one(),
            rhs: Rhs::Product {
                left: VarRef { name: "t".into(), indices: IndexString::new("x").unwrap() },
                right: VarRef { name: "F".into(), indices: IndexString::new("z").unwrap() },
            },
        };
        assert_eq!(classify(&product), OperationKind::Product);
    }

    #[test]
    fn factory_prefers_priority_and_falls_back() {
        let mut order = vec![BackendSpec::vendor("libxsmm")];
        order.extend(default_backends());
        let copy = action_copy(1.0);
        assert_eq!(backend_factory(&order, &copy).name, "copy");
        // Vendor entries are skipped because they are unavailable.
        assert!(!order[0].supports(OperationKind::Log, &copy));
    }

    #[test]
    fn fill_respects_pattern_and_padding() {
        let spp = SparsityPattern::diagonal(3);
        let layout = assign_layout(&[3, 3], &spp, LayoutPolicy::Aligned(4)).unwrap();
        let info = VarInfo {
            shape: vec![3, 3],
            layout,
            spp,
            constant: None,
            is_temp: false,
        };
        let buf: Vec<f64> = fill_storage(&info, 42);
        // Padded first dimension: interval [0,4) x [0,3).
        assert_eq!(buf.len(), 12);
        for (off, &v) in buf.iter().enumerate() {
            let (i, j) = (off % 4, off / 4);
            if i == j && i < 3 {
                assert!(v != 0.0);
            } else {
                assert_eq!(v, 0.0, "offset {off} should be padding or off-diagonal");
            }
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // Fixed values locked in for cross-language agreement with the
        // emitted C tests.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220A8397B1DCDAF);
        assert_eq!(splitmix64(&mut s), 0x6E789E6AA1B965F4);
        let mut s2 = 1234567u64;
        let z = splitmix64(&mut s2);
        let u = unit_f64(z);
        assert!((0.0..1.0).contains(&u));
    }
}
