//! Contraction identification, loop-over-GEMM enumeration, and the
//! dynamic program that picks index permutations of temporaries.
//!
//! After strength reduction every Einsum is a binary tree of Product
//! and IndexSum nodes. Runs of IndexSum nodes over a single Product
//! whose summed letters appear in both factors become Contraction
//! nodes, each of which is implemented as loops over a GEMM: result
//! letters may be batched (looped), remaining free letters fuse into
//! the M and N dimensions, contracted letters fuse into K, and either
//! factor may be read transposed. The cost of a candidate is the tuple
//! `(s, l, r, -f)`: non-unit-stride slices, left transposes, right
//! transposes, negated fused-index count, compared lexicographically on
//! `(s, l+r, -f)` with fewer left transposes deciding ties.
//!
//! Temporaries have no prescribed index order. A bottom-up dynamic
//! program over per-vertex permutation sets finds a configuration of
//! minimum total cost; leaves and sink-bound vertices contribute a
//! single fixed order.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::ast::{Node, NodeKind};
use crate::index::{letter_rank, IndexString, Letter};
use crate::layout::{assign_layout, LayoutPolicy, MemoryLayout};
use crate::pattern::SparsityPattern;
use crate::tensor::Tensor;

/// One loop dimension: a letter with its half-open iteration range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopRange {
    pub letter: Letter,
    pub lo: usize,
    pub hi: usize,
}

impl LoopRange {
    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn group_extent(group: &[LoopRange]) -> usize {
    group.iter().map(LoopRange::len).product()
}

/// A concrete loop-over-GEMM plan for one Contraction node.
///
/// The GEMM computes `C[M x N] (+)= alpha * op(A)[M x K] * op(B)[K x N]`
/// inside nested loops over the batched letters; `a_is_left` records
/// which contraction child supplies the A operand. Ranges stored here
/// describe the mapping as costed; code generation re-derives ranges
/// against the actual destination once action merging has settled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogDescriptor {
    pub batch: Vec<LoopRange>,
    pub m: Vec<LoopRange>,
    pub n: Vec<LoopRange>,
    pub k: Vec<LoopRange>,
    pub a_is_left: bool,
    pub transpose_a: bool,
    pub transpose_b: bool,
    /// The B operand is stored compressed-sparse-column.
    pub csc_b: bool,
    /// Batched letters that force a non-unit-stride slice somewhere.
    pub s_count: u32,
    /// Total fusions performed: sum over groups of (length - 1).
    pub fused_count: u32,
    /// Prefetch annotation: tensor greedily assigned to this node.
    pub prefetch: Option<String>,
}

impl LogDescriptor {
    pub fn m_extent(&self) -> usize {
        group_extent(&self.m)
    }

    pub fn n_extent(&self) -> usize {
        group_extent(&self.n)
    }

    pub fn k_extent(&self) -> usize {
        group_extent(&self.k)
    }

    pub fn batch_iterations(&self) -> usize {
        group_extent(&self.batch)
    }

    pub fn cost(&self) -> CostTuple {
        CostTuple {
            s: self.s_count,
            l: self.transpose_a as u32,
            r: self.transpose_b as u32,
            f: self.fused_count,
        }
    }

    /// Short notation like `C[(sn)p] = A[(sn)q] * B[pq]^T`.
    pub fn notation(&self, result: &str, left: &str, right: &str) -> String {
        let group = |rs: &[LoopRange]| -> String {
            let letters: String = rs.iter().map(|r| r.letter as char).collect();
            if rs.len() > 1 {
                format!("({letters})")
            } else {
                letters
            }
        };
        let batches: String =
            self.batch.iter().map(|r| format!("[{}]", r.letter as char)).collect();
        let (a, b) = if self.a_is_left { (left, right) } else { (right, left) };
        format!(
            "{result}[{}{}{batches}] = {a}[{}{}]{} * {b}[{}{}]{}{}",
            group(&self.m),
            group(&self.n),
            group(&self.m),
            group(&self.k),
            if self.transpose_a { "^T" } else { "" },
            group(&self.k),
            group(&self.n),
            if self.transpose_b { "^T" } else { "" },
            if self.csc_b { " (csc)" } else { "" },
        )
    }
}

/// The LoG cost tuple `(s, l, r, -f)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTuple {
    pub s: u32,
    pub l: u32,
    pub r: u32,
    pub f: u32,
}

impl CostTuple {
    pub const ZERO: CostTuple = CostTuple { s: 0, l: 0, r: 0, f: 0 };

    fn key(&self) -> (u32, u32, i64, u32) {
        (self.s, self.l + self.r, -(self.f as i64), self.l)
    }
}

/// A cost that may be infinite (no feasible mapping); addition is
/// componentwise with the infinite sentinel absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cost {
    Finite(CostTuple),
    Infinite,
}

impl Cost {
    pub fn add(self, other: Cost) -> Cost {
        match (self, other) {
            (Cost::Finite(a), Cost::Finite(b)) => Cost::Finite(CostTuple {
                s: a.s + b.s,
                l: a.l + b.l,
                r: a.r + b.r,
                f: a.f + b.f,
            }),
            _ => Cost::Infinite,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Cost::Finite(_))
    }
}

/// Lexicographic comparison on `(s, l+r, -f)`; the lower number of left
/// transposes decides when those agree.
pub fn compare_cost(a: &Cost, b: &Cost) -> Ordering {
    match (a, b) {
        (Cost::Infinite, Cost::Infinite) => Ordering::Equal,
        (Cost::Infinite, _) => Ordering::Greater,
        (_, Cost::Infinite) => Ordering::Less,
        (Cost::Finite(x), Cost::Finite(y)) => x.key().cmp(&y.key()),
    }
}

/// Errors raised while mapping contractions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapError {
    NoFeasibleMapping { context: String },
    TooManyLetters { indices: String },
}

impl fmt::Display for MapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapError::NoFeasibleMapping { context } => {
                write!(f, "no feasible loop-over-GEMM mapping for {context}")
            }
            MapError::TooManyLetters { indices } => {
                write!(f, "too many indices for permutation search: '{indices}'")
            }
        }
    }
}

impl core::error::Error for MapError {}

/// Replaces maximal IndexSum-over-Product runs by Contraction nodes.
/// Only letters occurring in both factors join a contraction; sums over
/// single-sided letters stay IndexSum nodes above it. Pure products
/// (outer or Hadamard, nothing summed) and lone sums are left intact
/// for generic code generation.
pub fn find_contractions(node: Node) -> Node {
    let mut summed: Vec<Letter> = Vec::new();
    let mut cursor = node;
    loop {
        match cursor.kind {
            NodeKind::IndexSum { letter, child } => {
                summed.push(letter);
                cursor = *child;
            }
            _ => break,
        }
    }
    match cursor.kind {
        NodeKind::Product { left, right } if !summed.is_empty() => {
            let left = Box::new(find_contractions(*left));
            let right = Box::new(find_contractions(*right));
            let shared: Vec<Letter> = summed
                .iter()
                .copied()
                .filter(|&l| left.indices.contains(l) && right.indices.contains(l))
                .collect();
            let unshared: Vec<Letter> =
                summed.iter().copied().filter(|l| !shared.contains(l)).collect();
            if shared.is_empty() {
                let product = Node {
                    kind: NodeKind::Product { left, right },
                    indices: cursor.indices,
                    spp: cursor.spp,
                    eqspp: cursor.eqspp,
                };
                return rebuild_sums(product, &summed);
            }
            let mut letters: Vec<Letter> = Vec::new();
            for &l in left.indices.letters().iter().chain(right.indices.letters()) {
                if !shared.contains(&l) && !letters.contains(&l) {
                    letters.push(l);
                }
            }
            letters.sort_by_key(|&l| letter_rank(l).unwrap());
            let indices = IndexString::from_letters(&letters);
            let spp = contraction_spp(&left, &right, &indices);
            let contraction = Node {
                kind: NodeKind::Contraction { left, right, summed: shared, log: None },
                indices,
                spp: Some(spp),
                eqspp: None,
            };
            rebuild_sums(contraction, &unshared)
        }
        kind => {
            let recursed = match kind {
                NodeKind::Product { left, right } => NodeKind::Product {
                    left: Box::new(find_contractions(*left)),
                    right: Box::new(find_contractions(*right)),
                },
                NodeKind::Add { children } => NodeKind::Add {
                    children: children.into_iter().map(find_contractions).collect(),
                },
                NodeKind::ScalarMul { coeff, child } => {
                    NodeKind::ScalarMul { coeff, child: Box::new(find_contractions(*child)) }
                }
                NodeKind::Permute { child } => {
                    NodeKind::Permute { child: Box::new(find_contractions(*child)) }
                }
                other => other,
            };
            let inner = Node {
                kind: recursed,
                indices: cursor.indices,
                spp: cursor.spp,
                eqspp: cursor.eqspp,
            };
            rebuild_sums(inner, &summed)
        }
    }
}

/// Wraps a node in IndexSum nodes; `summed[0]` ends up outermost.
fn rebuild_sums(mut node: Node, summed: &[Letter]) -> Node {
    for &letter in summed.iter().rev() {
        let mut letters: Vec<Letter> =
            node.indices.letters().iter().copied().filter(|&l| l != letter).collect();
        letters.sort_by_key(|&l| letter_rank(l).unwrap());
        let indices = IndexString::from_letters(&letters);
        let spp = node.spp.as_ref().map(|p| {
            let d = node.indices.position(letter).unwrap();
            let reduced = p.or_project_dim(d);
            // The projection keeps the child's dimension order, which
            // may differ from the sorted result order.
            let remaining: Vec<Letter> =
                node.indices.letters().iter().copied().filter(|&l| l != letter).collect();
            let perm: Vec<usize> = letters
                .iter()
                .map(|&l| remaining.iter().position(|&x| x == l).unwrap())
                .collect();
            reduced.permuted(&perm)
        });
        node = Node {
            kind: NodeKind::IndexSum { letter, child: Box::new(node) },
            indices,
            spp,
            eqspp: None,
        };
    }
    node
}

/// Result pattern of a contraction: boolean product of the children's
/// effective patterns, projected onto the result letters.
fn contraction_spp(left: &Node, right: &Node, indices: &IndexString) -> SparsityPattern {
    use crate::eqspp::FactorPattern;
    let lp = FactorPattern::from_pattern(&left.indices, left.effective_spp().unwrap());
    let rp = FactorPattern::from_pattern(&right.indices, right.effective_spp().unwrap());
    let product = lp.and_product(&rp).expect("contraction patterns stay within size limits");
    let away: Vec<Letter> =
        product.letters().into_iter().filter(|l| !indices.contains(*l)).collect();
    let projected = product.or_project_away(&away);
    let sizes: Vec<usize> = indices
        .letters()
        .iter()
        .map(|&l| {
            left.indices
                .position(l)
                .map(|d| left.effective_spp().unwrap().extents()[d])
                .or_else(|| {
                    right.indices.position(l).map(|d| right.effective_spp().unwrap().extents()[d])
                })
                .unwrap()
        })
        .collect();
    projected.materialize(indices, &sizes)
}

/// How one side of a contraction is stored for mapping purposes.
#[derive(Debug, Clone)]
pub struct OperandInfo {
    /// Letter order of the stored dimensions.
    pub order: IndexString,
    pub layout: MemoryLayout,
    /// Per-letter support intervals (equivalent-sparsity bounding box).
    pub support: Vec<(usize, usize)>,
}

impl OperandInfo {
    fn dim_of(&self, letter: Letter) -> Option<usize> {
        self.order.position(letter)
    }

    fn stored_interval(&self, letter: Letter) -> Option<(usize, usize)> {
        let d = self.dim_of(letter)?;
        match &self.layout {
            MemoryLayout::Csc(c) => Some((0, c.shape()[d])),
            l => l.as_box().map(|b| b.intervals()[d]),
        }
    }

    fn support_interval(&self, letter: Letter) -> Option<(usize, usize)> {
        self.dim_of(letter).map(|d| self.support[d])
    }
}

fn intersect(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo, hi.max(lo))
}

/// Enumerates all feasible loop-over-GEMM implementations of a binary
/// contraction with fixed operand and result orders. Candidates differ
/// in the choice of batched letters and the operand orientation, with
/// transposes implied by the stored orders; fused groups must occupy
/// adjacent dimensions and pass the stride condition.
pub fn enumerate_logs(
    result: &OperandInfo,
    left: &OperandInfo,
    right: &OperandInfo,
    summed: &[Letter],
) -> Vec<LogDescriptor> {
    let mut out = Vec::new();
    let mut mandatory_batch: Vec<Letter> = Vec::new();
    let mut free_left: Vec<Letter> = Vec::new();
    let mut free_right: Vec<Letter> = Vec::new();
    for &l in result.order.letters() {
        match (left.order.contains(l), right.order.contains(l)) {
            (true, true) => mandatory_batch.push(l),
            (true, false) => free_left.push(l),
            (false, true) => free_right.push(l),
            (false, false) => return out,
        }
    }
    // Contracted letters must live in both operands.
    if summed.iter().any(|&l| !left.order.contains(l) || !right.order.contains(l)) {
        return out;
    }
    let optional: Vec<Letter> = free_left.iter().chain(free_right.iter()).copied().collect();

    for choice in 0u32..(1 << optional.len()) {
        let batched: Vec<Letter> = mandatory_batch
            .iter()
            .copied()
            .chain(
                optional
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| choice >> i & 1 == 1)
                    .map(|(_, &l)| l),
            )
            .collect();
        for a_is_left in [true, false] {
            let (a_op, b_op) = if a_is_left { (left, right) } else { (right, left) };
            let m_set: Vec<Letter> = (if a_is_left { &free_left } else { &free_right })
                .iter()
                .copied()
                .filter(|l| !batched.contains(l))
                .collect();
            let n_set: Vec<Letter> = (if a_is_left { &free_right } else { &free_left })
                .iter()
                .copied()
                .filter(|l| !batched.contains(l))
                .collect();
            if let Some(desc) =
                try_candidate(result, a_op, b_op, summed, &batched, &m_set, &n_set, a_is_left)
            {
                out.push(desc);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn try_candidate(
    result: &OperandInfo,
    a_op: &OperandInfo,
    b_op: &OperandInfo,
    summed: &[Letter],
    batched: &[Letter],
    m_set: &[Letter],
    n_set: &[Letter],
    a_is_left: bool,
) -> Option<LogDescriptor> {
    // CSC storage maps only as the B operand, untransposed, unbatched,
    // with single-letter K and N (dense x sparse GEMM).
    if matches!(a_op.layout, MemoryLayout::Csc(_)) {
        return None;
    }
    let csc_b = matches!(b_op.layout, MemoryLayout::Csc(_));
    if csc_b && !batched.is_empty() {
        return None;
    }

    let sliced = |info: &OperandInfo| -> Vec<Letter> {
        info.order.letters().iter().copied().filter(|l| !batched.contains(l)).collect()
    };

    // Result view: sliced order must be an M run followed by an N run.
    let r_sliced = sliced(result);
    if r_sliced.len() != m_set.len() + n_set.len() {
        return None;
    }
    let (m_seq, n_seq) = r_sliced.split_at(m_set.len());
    if !m_set.iter().all(|l| m_seq.contains(l)) || !n_set.iter().all(|l| n_seq.contains(l)) {
        return None;
    }

    // A view: [M][K] plain or [K][M] transposed.
    let a_sliced = sliced(a_op);
    if a_sliced.len() != m_seq.len() + summed.len() {
        return None;
    }
    let (transpose_a, k_seq): (bool, Vec<Letter>) = if a_sliced[..m_seq.len()] == *m_seq {
        (false, a_sliced[m_seq.len()..].to_vec())
    } else if a_sliced[a_sliced.len() - m_seq.len()..] == *m_seq {
        (true, a_sliced[..summed.len()].to_vec())
    } else {
        return None;
    };
    if !summed.iter().all(|l| k_seq.contains(l)) {
        return None;
    }

    // B view: [K][N] plain or [N][K] transposed, with matching K order.
    let b_sliced = sliced(b_op);
    if b_sliced.len() != n_seq.len() + summed.len() {
        return None;
    }
    let transpose_b = if b_sliced[..k_seq.len()] == *k_seq && b_sliced[k_seq.len()..] == *n_seq {
        false
    } else if b_sliced[..n_seq.len()] == *n_seq && b_sliced[n_seq.len()..] == *k_seq {
        true
    } else {
        return None;
    };
    if csc_b && (transpose_b || k_seq.len() != 1 || n_seq.len() != 1) {
        return None;
    }

    // Fused groups must be adjacent dims and satisfy the stride
    // condition on every participating layout.
    let group_fusable = |info: &OperandInfo, seq: &[Letter]| -> bool {
        if seq.len() <= 1 {
            return true;
        }
        let dims: Option<Vec<usize>> = seq.iter().map(|&l| info.dim_of(l)).collect();
        let Some(dims) = dims else {
            return false;
        };
        if dims.windows(2).any(|w| w[1] != w[0] + 1) {
            return false;
        }
        crate::layout::can_fuse(&info.layout, dims[0], dims[dims.len() - 1])
    };
    if !(group_fusable(result, m_seq)
        && group_fusable(result, n_seq)
        && group_fusable(a_op, m_seq)
        && group_fusable(a_op, &k_seq)
        && group_fusable(b_op, &k_seq)
        && group_fusable(b_op, n_seq))
    {
        return None;
    }

    // Iteration ranges. A letter that is not last within its fused
    // group must cover the same full interval everywhere.
    let build_group = |seq: &[Letter],
                       tensors: &[&OperandInfo],
                       with_support: bool|
     -> Option<Vec<LoopRange>> {
        let mut out = Vec::with_capacity(seq.len());
        for (i, &letter) in seq.iter().enumerate() {
            let last = i == seq.len() - 1;
            let mut r = (0usize, usize::MAX);
            for t in tensors {
                if t.dim_of(letter).is_some() {
                    r = intersect(r, t.stored_interval(letter)?);
                    if with_support && last {
                        r = intersect(r, t.support_interval(letter)?);
                    }
                }
            }
            if !last {
                for t in tensors {
                    if t.dim_of(letter).is_some() && t.stored_interval(letter)? != r {
                        return None;
                    }
                }
            }
            out.push(LoopRange { letter, lo: r.0, hi: r.1 });
        }
        Some(out)
    };
    let m = build_group(m_seq, &[result, a_op], false)?;
    let n = build_group(n_seq, &[result, b_op], false)?;
    let k = build_group(&k_seq, &[a_op, b_op], true)?;
    // Batched letters are independent loops, not a fused group.
    let mut batch = Vec::with_capacity(batched.len());
    for &letter in batched {
        let mut r = (0usize, usize::MAX);
        for t in [result, a_op, b_op] {
            if t.dim_of(letter).is_some() {
                r = intersect(r, t.stored_interval(letter)?);
            }
        }
        batch.push(LoopRange { letter, lo: r.0, hi: r.1 });
    }

    // Non-unit-stride count: a batched letter stored below every matrix
    // letter of some tensor forces slices with non-unit leading stride.
    let mut s_count = 0u32;
    for &b in batched {
        let mut bad = false;
        for info in [result, a_op, b_op] {
            let Some(pos) = info.dim_of(b) else { continue };
            let first_matrix = info
                .order
                .letters()
                .iter()
                .position(|l| !batched.contains(l))
                .unwrap_or(usize::MAX);
            if pos < first_matrix {
                bad = true;
            }
        }
        if bad {
            s_count += 1;
        }
    }

    let fused_count = [m_seq.len(), n_seq.len(), k_seq.len()]
        .iter()
        .map(|&l| l.saturating_sub(1) as u32)
        .sum();

    Some(LogDescriptor {
        batch,
        m,
        n,
        k,
        a_is_left,
        transpose_a,
        transpose_b,
        csc_b,
        s_count,
        fused_count,
        prefetch: None,
    })
}

/// Minimum-cost implementation among the enumerated candidates, with a
/// deterministic tie-break on the descriptor encoding.
pub fn min_log(
    result: &OperandInfo,
    left: &OperandInfo,
    right: &OperandInfo,
    summed: &[Letter],
) -> Option<LogDescriptor> {
    let mut best: Option<LogDescriptor> = None;
    for cand in enumerate_logs(result, left, right, summed) {
        let better = match &best {
            None => true,
            Some(b) => match compare_cost(&Cost::Finite(cand.cost()), &Cost::Finite(b.cost())) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => descriptor_key(&cand) < descriptor_key(b),
            },
        };
        if better {
            best = Some(cand);
        }
    }
    best
}

fn descriptor_key(d: &LogDescriptor) -> (usize, Vec<Letter>, bool, bool, bool) {
    (
        d.batch.len(),
        d.batch.iter().map(|r| r.letter).collect(),
        !d.a_is_left,
        d.transpose_a,
        d.transpose_b,
    )
}

/// Environment for the permutation search.
pub struct MapperEnv<'a> {
    pub tensors: &'a BTreeMap<String, Tensor>,
    /// Alignment (in elements) applied to the first dimension of
    /// temporaries.
    pub temp_alignment: usize,
}

impl MapperEnv<'_> {
    /// Storage of a temporary with the given letter order: the tight
    /// bounding box of its pattern, first dimension aligned.
    pub fn temp_operand(&self, node: &Node, order: &IndexString) -> OperandInfo {
        let spp = node.effective_spp().expect("temporaries carry patterns");
        let perm: Vec<usize> =
            order.letters().iter().map(|&l| node.indices.position(l).unwrap()).collect();
        let permuted = spp.permuted(&perm);
        let shape = permuted.extents().to_vec();
        let layout = assign_layout(&shape, &permuted, LayoutPolicy::Aligned(self.temp_alignment))
            .expect("box layouts are total");
        let support = permuted.bounding_box();
        OperandInfo { order: order.clone(), layout, support }
    }

    /// Storage of a node in a given order: the declared tensor's layout
    /// for leaves, a temporary's box otherwise.
    pub fn operand(&self, node: &Node, order: &IndexString) -> OperandInfo {
        if let NodeKind::Leaf { tensor } = &node.kind {
            let t = &self.tensors[tensor.as_str()];
            let layout = t.layout().expect("leaf layouts are assigned before mapping").clone();
            let support = node
                .effective_spp()
                .map(|p| p.bounding_box())
                .unwrap_or_else(|| t.spp().bounding_box());
            return OperandInfo { order: node.indices.clone(), layout, support };
        }
        self.temp_operand(node, order)
    }

    /// Storage of a contraction result that is written straight into a
    /// declared tensor.
    fn sink_operand(&self, node: &Node, order: &IndexString, tensor: &str) -> OperandInfo {
        let t = &self.tensors[tensor];
        let layout = t.layout().expect("declared tensors carry layouts before mapping").clone();
        let support = node
            .spp
            .as_ref()
            .map(|p| {
                let perm: Vec<usize> =
                    order.letters().iter().map(|&l| node.indices.position(l).unwrap()).collect();
                p.permuted(&perm).bounding_box()
            })
            .unwrap_or_else(|| t.spp().bounding_box());
        OperandInfo { order: order.clone(), layout, support }
    }
}

const MAX_PERM_LETTERS: usize = 7;

/// All permutations of an index string, lexicographically ordered.
fn permutations_of(indices: &IndexString) -> Vec<IndexString> {
    let mut letters = indices.sorted().letters().to_vec();
    let n = letters.len();
    let mut out = vec![IndexString::from_letters(&letters)];
    if n < 2 {
        return out;
    }
    let rank = |l: Letter| letter_rank(l).unwrap();
    loop {
        // next_permutation
        let mut i = n - 1;
        while i > 0 && rank(letters[i - 1]) >= rank(letters[i]) {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        let mut j = n - 1;
        while rank(letters[j]) <= rank(letters[i - 1]) {
            j -= 1;
        }
        letters.swap(i - 1, j);
        letters[i..].reverse();
        out.push(IndexString::from_letters(&letters));
    }
}

/// Whether an Add child is a pure read (fixed storage, no order
/// constraint) rather than a computed value.
fn is_read_child(node: &Node) -> bool {
    match &node.kind {
        NodeKind::Leaf { .. } | NodeKind::Permute { .. } => true,
        NodeKind::ScalarMul { child, .. } => matches!(child.kind, NodeKind::Leaf { .. }),
        _ => false,
    }
}

/// Per-vertex solution table: best sub-tree cost and recorded choice
/// for each permissible index permutation of the vertex.
struct Solved {
    table: BTreeMap<IndexString, (Cost, Choice)>,
    children: Vec<Solved>,
}

#[derive(Clone)]
enum Choice {
    None,
    /// Chosen permutations of the children, in child order.
    Children(Vec<IndexString>),
    /// Contraction: chosen child permutations plus the descriptor.
    Log { xl: IndexString, xr: IndexString, desc: Box<LogDescriptor> },
}

/// Sink context: the vertex's result is written straight into a
/// declared tensor with a fixed order.
#[derive(Clone, Copy)]
struct Sink<'a> {
    name: &'a str,
    order: &'a IndexString,
}

fn perm_set(node: &Node, sink: Option<Sink>) -> Result<Vec<IndexString>, MapError> {
    match (&node.kind, sink) {
        (NodeKind::Leaf { .. }, _) => Ok(vec![node.indices.clone()]),
        (_, Some(s)) => Ok(vec![s.order.clone()]),
        _ => {
            if node.indices.len() > MAX_PERM_LETTERS {
                return Err(MapError::TooManyLetters { indices: format!("{}", node.indices) });
            }
            Ok(permutations_of(&node.indices))
        }
    }
}

fn solve(node: &Node, env: &MapperEnv, sink: Option<Sink>) -> Result<Solved, MapError> {
    let own_perms = perm_set(node, sink)?;
    match &node.kind {
        NodeKind::Leaf { .. } => {
            let mut table = BTreeMap::new();
            table.insert(node.indices.clone(), (Cost::Finite(CostTuple::ZERO), Choice::None));
            Ok(Solved { table, children: vec![] })
        }
        NodeKind::ScalarMul { child, .. } => {
            // Transparent: same letters; the multiplier folds into the
            // eventual action. A leaf child keeps its fixed order.
            let child_sink = if matches!(child.kind, NodeKind::Leaf { .. }) { None } else { sink };
            let solved = solve(child, env, child_sink)?;
            let mut table = BTreeMap::new();
            for y in own_perms {
                match pick_child_order(child, &solved, &y) {
                    Some((order, cost)) => {
                        table.insert(y, (cost, Choice::Children(vec![order])));
                    }
                    None => {
                        table.insert(y, (Cost::Infinite, Choice::None));
                    }
                }
            }
            Ok(Solved { table, children: vec![solved] })
        }
        NodeKind::Permute { child } => {
            // The child's order is free; the copy reorders.
            let solved = solve(child, env, None)?;
            let (best_perm, best_cost) = best_of(&solved, child)?;
            let mut table = BTreeMap::new();
            for y in own_perms {
                table.insert(y, (best_cost, Choice::Children(vec![best_perm.clone()])));
            }
            Ok(Solved { table, children: vec![solved] })
        }
        NodeKind::Add { children } => {
            // Computed children must share the Add's order; reads go
            // through stride maps and keep their own.
            let solved: Vec<Solved> = children
                .iter()
                .map(|c| solve(c, env, if is_read_child(c) { None } else { sink }))
                .collect::<Result<_, _>>()?;
            let mut table = BTreeMap::new();
            for y in own_perms {
                let mut total = Cost::Finite(CostTuple::ZERO);
                let mut chosen = Vec::with_capacity(children.len());
                for (c, s) in children.iter().zip(&solved) {
                    match pick_child_order(c, s, &y) {
                        Some((order, cost)) => {
                            total = total.add(cost);
                            chosen.push(order);
                        }
                        None => {
                            total = Cost::Infinite;
                            chosen.push(y.clone());
                        }
                    }
                }
                table.insert(y, (total, Choice::Children(chosen)));
            }
            Ok(Solved { table, children: solved })
        }
        NodeKind::Product { left, right } => {
            // Generic product: children orders are free, node cost zero.
            let ls = solve(left, env, None)?;
            let rs = solve(right, env, None)?;
            let (lp, lc) = best_of(&ls, left)?;
            let (rp, rc) = best_of(&rs, right)?;
            let mut table = BTreeMap::new();
            for y in own_perms {
                table.insert(y, (lc.add(rc), Choice::Children(vec![lp.clone(), rp.clone()])));
            }
            Ok(Solved { table, children: vec![ls, rs] })
        }
        NodeKind::IndexSum { child, .. } => {
            let solved = solve(child, env, None)?;
            let (bp, bc) = best_of(&solved, child)?;
            let mut table = BTreeMap::new();
            for y in own_perms {
                table.insert(y, (bc, Choice::Children(vec![bp.clone()])));
            }
            Ok(Solved { table, children: vec![solved] })
        }
        NodeKind::Contraction { left, right, summed, .. } => {
            let ls = solve(left, env, None)?;
            let rs = solve(right, env, None)?;
            let left_perms: Vec<IndexString> = ls.table.keys().cloned().collect();
            let right_perms: Vec<IndexString> = rs.table.keys().cloned().collect();
            let mut table = BTreeMap::new();
            for y in &own_perms {
                let result_info = match sink {
                    Some(s) => env.sink_operand(node, y, s.name),
                    None => env.temp_operand(node, y),
                };
                let mut best: Option<(Cost, Choice)> = None;
                for xl in &left_perms {
                    let (lcost, _) = ls.table[xl];
                    if !lcost.is_finite() {
                        continue;
                    }
                    let l_info = env.operand(left, xl);
                    for xr in &right_perms {
                        let (rcost, _) = rs.table[xr];
                        if !rcost.is_finite() {
                            continue;
                        }
                        let r_info = env.operand(right, xr);
                        let Some(desc) = min_log(&result_info, &l_info, &r_info, summed) else {
                            continue;
                        };
                        let total = Cost::Finite(desc.cost()).add(lcost).add(rcost);
                        // First minimum wins; iteration over sorted
                        // permutation strings keeps ties deterministic.
                        let better = match &best {
                            None => true,
                            Some((bc, _)) => compare_cost(&total, bc) == Ordering::Less,
                        };
                        if better {
                            best = Some((
                                total,
                                Choice::Log {
                                    xl: xl.clone(),
                                    xr: xr.clone(),
                                    desc: Box::new(desc),
                                },
                            ));
                        }
                    }
                }
                table.insert(y.clone(), best.unwrap_or((Cost::Infinite, Choice::None)));
            }
            Ok(Solved { table, children: vec![ls, rs] })
        }
        NodeKind::Einsum { .. } => {
            unreachable!("einsum nodes are strength-reduced before mapping")
        }
    }
}

/// Best (order, cost) entry of a table, ties broken by the smaller
/// permutation string.
fn best_of(solved: &Solved, node: &Node) -> Result<(IndexString, Cost), MapError> {
    let mut best: Option<(IndexString, Cost)> = None;
    for (order, (cost, _)) in &solved.table {
        let better = match &best {
            None => true,
            Some((border, bcost)) => match compare_cost(cost, bcost) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => order < border,
            },
        };
        if better {
            best = Some((order.clone(), *cost));
        }
    }
    best.ok_or_else(|| MapError::NoFeasibleMapping { context: format!("{}", node.indices) })
}

/// Order for a child evaluated under a parent order: exact match when
/// the child's table has one, otherwise the child's own best entry
/// (fixed-storage reads).
fn pick_child_order(
    child: &Node,
    solved: &Solved,
    parent: &IndexString,
) -> Option<(IndexString, Cost)> {
    if let Some((c, _)) = solved.table.get(parent) {
        return Some((parent.clone(), *c));
    }
    if is_read_child(child) {
        return best_of(solved, child).ok();
    }
    None
}

/// Runs the permutation dynamic program for one statement tree and
/// rewrites the tree in place: every vertex gets its chosen order (with
/// patterns permuted to match) and every Contraction its descriptor.
/// Returns the optimal configuration cost.
pub fn optimize_permutations(
    node: &mut Node,
    target: &str,
    target_order: &IndexString,
    env: &MapperEnv,
) -> Result<Cost, MapError> {
    let sink = Sink { name: target, order: target_order };
    let solved = solve(node, env, Some(sink))?;
    if let Some(&(cost, _)) = solved.table.get(target_order) {
        if cost.is_finite() {
            apply_choice(node, &solved, target_order);
            return Ok(cost);
        }
    }
    // Fall back to a free root order plus an explicit reorder into the
    // target.
    let solved = solve(node, env, None)?;
    let (order, cost) = best_of(&solved, node)?;
    if !cost.is_finite() {
        return Err(MapError::NoFeasibleMapping {
            context: format!("{target}['{target_order}']"),
        });
    }
    apply_choice(node, &solved, &order);
    let spp = node.spp.clone();
    let inner = core::mem::replace(node, Node::leaf("_", IndexString::default()));
    *node = Node {
        kind: NodeKind::Permute { child: Box::new(inner) },
        indices: target_order.clone(),
        spp,
        eqspp: None,
    };
    Ok(cost)
}

/// Applies recorded choices: reorders `indices` (and patterns) of every
/// vertex and installs LoG descriptors.
fn apply_choice(node: &mut Node, solved: &Solved, order: &IndexString) {
    let choice = solved.table.get(order).map(|(_, c)| c.clone()).unwrap_or(Choice::None);
    reorder_node(node, order);
    match (&mut node.kind, choice) {
        (NodeKind::Contraction { left, right, log, .. }, Choice::Log { xl, xr, desc }) => {
            apply_choice(left, &solved.children[0], &xl);
            apply_choice(right, &solved.children[1], &xr);
            *log = Some(*desc);
        }
        (NodeKind::ScalarMul { child, .. }, Choice::Children(orders))
        | (NodeKind::Permute { child }, Choice::Children(orders))
        | (NodeKind::IndexSum { child, .. }, Choice::Children(orders)) => {
            apply_choice(child, &solved.children[0], &orders[0]);
        }
        (NodeKind::Add { children }, Choice::Children(orders)) => {
            for ((c, s), o) in children.iter_mut().zip(&solved.children).zip(&orders) {
                apply_choice(c, s, o);
            }
        }
        (NodeKind::Product { left, right }, Choice::Children(orders)) => {
            apply_choice(left, &solved.children[0], &orders[0]);
            apply_choice(right, &solved.children[1], &orders[1]);
        }
        _ => {}
    }
}

/// Rewrites a vertex to a new letter order, permuting stored patterns.
fn reorder_node(node: &mut Node, order: &IndexString) {
    if node.indices == *order {
        return;
    }
    let perm: Vec<usize> =
        order.letters().iter().map(|&l| node.indices.position(l).unwrap()).collect();
    if let Some(spp) = &node.spp {
        node.spp = Some(spp.permuted(&perm));
    }
    if let Some(eq) = &node.eqspp {
        node.eqspp = Some(eq.permuted(&perm));
    }
    node.indices = order.clone();
}

/// Exhaustive configuration-space minimum, the independent oracle for
/// the dynamic program: enumerates the full Cartesian product of all
/// vertices' permissible permutations and evaluates the recursive cost
/// directly, without memoization.
pub fn exhaustive_config_minimum(
    node: &Node,
    target: &str,
    target_order: &IndexString,
    env: &MapperEnv,
) -> Result<Cost, MapError> {
    struct Vertex<'n> {
        node: &'n Node,
        perms: Vec<IndexString>,
        children: Vec<usize>,
        sinked: bool,
    }

    fn collect<'n>(
        node: &'n Node,
        sinked: bool,
        fixed: &IndexString,
        vertices: &mut Vec<Vertex<'n>>,
    ) -> Result<usize, MapError> {
        let mut children = Vec::new();
        for c in node.children() {
            let child_sinked = match &node.kind {
                NodeKind::ScalarMul { .. } => {
                    sinked && !matches!(c.kind, NodeKind::Leaf { .. })
                }
                NodeKind::Add { .. } => sinked && !is_read_child(c),
                _ => false,
            };
            children.push(collect(c, child_sinked, fixed, vertices)?);
        }
        let perms = match (&node.kind, sinked) {
            (NodeKind::Leaf { .. }, _) => vec![node.indices.clone()],
            (_, true) => vec![fixed.clone()],
            _ => {
                if node.indices.len() > MAX_PERM_LETTERS {
                    return Err(MapError::TooManyLetters { indices: format!("{}", node.indices) });
                }
                permutations_of(&node.indices)
            }
        };
        vertices.push(Vertex { node, perms, children, sinked });
        Ok(vertices.len() - 1)
    }

    let mut vertices: Vec<Vertex> = Vec::new();
    collect(node, true, target_order, &mut vertices)?;
    let n = vertices.len();
    let mut assignment = vec![0usize; n];
    let mut best = Cost::Infinite;
    loop {
        let mut total = Cost::Finite(CostTuple::ZERO);
        for (vi, v) in vertices.iter().enumerate() {
            let own = &v.perms[assignment[vi]];
            let cost = match &v.node.kind {
                NodeKind::Contraction { left, right, summed, .. } => {
                    let result_info = if v.sinked {
                        env.sink_operand(v.node, own, target)
                    } else {
                        env.temp_operand(v.node, own)
                    };
                    let li = v.children[0];
                    let ri = v.children[1];
                    let l_info = env.operand(left, &vertices[li].perms[assignment[li]]);
                    let r_info = env.operand(right, &vertices[ri].perms[assignment[ri]]);
                    match min_log(&result_info, &l_info, &r_info, summed) {
                        Some(d) => Cost::Finite(d.cost()),
                        None => Cost::Infinite,
                    }
                }
                NodeKind::Add { children } => {
                    let ok = children.iter().zip(&v.children).all(|(c, &ci)| {
                        is_read_child(c) || vertices[ci].perms[assignment[ci]] == *own
                    });
                    if ok {
                        Cost::Finite(CostTuple::ZERO)
                    } else {
                        Cost::Infinite
                    }
                }
                NodeKind::ScalarMul { child, .. } => {
                    let ci = v.children[0];
                    if matches!(child.kind, NodeKind::Leaf { .. })
                        || vertices[ci].perms[assignment[ci]] == *own
                    {
                        Cost::Finite(CostTuple::ZERO)
                    } else {
                        Cost::Infinite
                    }
                }
                _ => Cost::Finite(CostTuple::ZERO),
            };
            total = total.add(cost);
            if !total.is_finite() {
                break;
            }
        }
        if compare_cost(&total, &best) == Ordering::Less {
            best = total;
        }
        let mut d = 0;
        loop {
            if d == n {
                return Ok(best);
            }
            assignment[d] += 1;
            if assignment[d] < vertices[d].perms.len() {
                break;
            }
            assignment[d] = 0;
            d += 1;
        }
    }
}

/// Determines prefetch capabilities and greedily assigns requested
/// tensors: each request goes to the unassigned loop-over-GEMM node
/// whose result byte size is closest to the request's. Unmatched
/// requests yield diagnostics.
pub fn assign_prefetch(
    roots: &mut [&mut Node],
    requests: &[String],
    tensors: &BTreeMap<String, Tensor>,
    elem_width: usize,
) -> Vec<crate::ast::Diagnostic> {
    let mut capabilities: Vec<(Vec<usize>, usize)> = Vec::new();
    for (ri, root) in roots.iter().enumerate() {
        let mut path = vec![ri];
        collect_logs(root, &mut path, &mut |path, node| {
            let bytes = node
                .effective_spp()
                .map(|p| {
                    p.bounding_box().iter().map(|&(lo, hi)| hi - lo).product::<usize>()
                        * elem_width
                })
                .unwrap_or(0);
            capabilities.push((path.to_vec(), bytes));
        });
    }
    let mut taken = vec![false; capabilities.len()];
    let mut diagnostics = Vec::new();
    let mut assignments: Vec<(usize, String)> = Vec::new();
    for req in requests {
        let Some(t) = tensors.get(req) else { continue };
        let want =
            t.layout().map(|l| l.element_count()).unwrap_or(t.element_count()) * elem_width;
        let mut pick: Option<(usize, usize)> = None;
        for (i, (_, bytes)) in capabilities.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = bytes.abs_diff(want);
            if pick.map(|(_, bd)| d < bd).unwrap_or(true) {
                pick = Some((i, d));
            }
        }
        match pick {
            Some((i, _)) => {
                taken[i] = true;
                assignments.push((i, req.clone()));
            }
            None => diagnostics.push(crate::ast::Diagnostic {
                code: "unmatched-prefetch",
                message: format!("no loop-over-GEMM node available to prefetch '{req}'"),
            }),
        }
    }
    for (slot, tensor) in assignments {
        let path = capabilities[slot].0.clone();
        let root: &mut Node = roots[path[0]];
        install_prefetch(root, &path[1..], &tensor);
    }
    diagnostics
}

fn collect_logs(node: &Node, path: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &Node)) {
    if let NodeKind::Contraction { log: Some(_), .. } = &node.kind {
        f(path, node);
    }
    for (i, c) in node.children().into_iter().enumerate() {
        path.push(i);
        collect_logs(c, path, f);
        path.pop();
    }
}

fn install_prefetch(node: &mut Node, path: &[usize], tensor: &str) {
    if path.is_empty() {
        if let NodeKind::Contraction { log: Some(d), .. } = &mut node.kind {
            d.prefetch = Some(tensor.to_owned());
        }
        return;
    }
    let idx = path[0];
    let child: &mut Node = match &mut node.kind {
        NodeKind::ScalarMul { child, .. }
        | NodeKind::Permute { child }
        | NodeKind::IndexSum { child, .. } => child,
        NodeKind::Add { children } | NodeKind::Einsum { children } => &mut children[idx],
        NodeKind::Product { left, right } | NodeKind::Contraction { left, right, .. } => {
            if idx == 0 {
                left
            } else {
                right
            }
        }
        NodeKind::Leaf { .. } => return,
    };
    install_prefetch(child, &path[1..], tensor);
}
