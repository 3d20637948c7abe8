//! Strength reduction: exhaustive search for an operation-minimal
//! sequence of binary multiplication and summation formulae realizing
//! an Einstein sum, under a sparse cost model.
//!
//! A multiplication formula `V = X x Y` costs `nnz(V)` operations; a
//! summation formula `W = sum_i Z` costs `nnz(Z) - nnz(W)`. Intermediate
//! patterns are computed explicitly, so the counts are exact for the
//! given sparsity. The search walks states that partition the operand
//! set into terms with per-term summed letters, memoizes the minimum
//! remaining cost per state, and reconstructs a deterministic schedule:
//! least cost, then fewest formulae, then the lexicographically
//! smallest sequence of result index strings.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::ast::{Node, NodeKind};
use crate::eqspp::FactorPattern;
use crate::index::{build_index_space, letter_rank, IndexError, IndexSpace, IndexString, Letter};
use crate::pattern::SparsityPattern;

/// Caps for the independent brute-force oracle.
pub const ORACLE_MAX_OPERANDS: usize = 7;
pub const ORACLE_MAX_LETTERS: usize = 10;

/// Errors raised by the strength-reduction search and its oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrengthError {
    Index(IndexError),
    SizeLimitExceeded { what: &'static str, size: usize, limit: usize },
    /// The final term does not match the requested result letters.
    UnreachableTarget { target: String },
}

impl fmt::Display for StrengthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrengthError::Index(e) => write!(f, "{e}"),
            StrengthError::SizeLimitExceeded { what, size, limit } => {
                write!(f, "{what} count {size} exceeds oracle limit {limit}")
            }
            StrengthError::UnreachableTarget { target } => {
                write!(f, "cannot reach result indices '{target}'")
            }
        }
    }
}

impl core::error::Error for StrengthError {}

impl From<IndexError> for StrengthError {
    fn from(e: IndexError) -> Self {
        StrengthError::Index(e)
    }
}

/// The two formula shapes of a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    /// `result = left x right`; result letters are the union.
    Multiplication { left: usize, right: usize, result: IndexString, nnz: u64 },
    /// `result = sum_letter operand`; result rank is one less.
    Summation { operand: usize, letter: Letter, result: IndexString, nnz: u64 },
}

impl Formula {
    pub fn result(&self) -> &IndexString {
        match self {
            Formula::Multiplication { result, .. } | Formula::Summation { result, .. } => result,
        }
    }
}

/// An ordered formula list ending in the target, with its total cost.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub formulas: Vec<Formula>,
    pub cost: u64,
}

/// Operation count of one formula under the sparse cost model.
pub fn formula_cost(kind: &Formula, operand_nnz: u64) -> u64 {
    match kind {
        Formula::Multiplication { nnz, .. } => *nnz,
        Formula::Summation { nnz, .. } => operand_nnz - *nnz,
    }
}

/// Operation count of the naive implementation: nested loops over the
/// full global index space with `n` multiplies-and-add per point
/// (n-1 multiplications and one addition for n operands).
pub fn naive_flop_count(operands: usize, space: &IndexSpace) -> u64 {
    let points = space.point_count();
    u64::try_from(points * operands as u128).expect("naive count fits u64 at supported sizes")
}

/// One in-flight term of the search: which operands it covers, which
/// letters were summed inside it, and its current pattern.
#[derive(Clone)]
struct Term {
    ops: u32,
    summed: u64,
    letters: Vec<Letter>,
    pattern: FactorPattern,
    node: Option<Box<Node>>,
}

/// Canonical state key: sorted (operand mask, summed mask) pairs.
type StateKey = Vec<(u32, u64)>;

struct Search<'a> {
    space: &'a IndexSpace,
    target: &'a IndexString,
    /// Letter bit positions in lexical order.
    letter_bit: BTreeMap<Letter, u32>,
    /// Which operands use each letter.
    letter_ops: BTreeMap<Letter, u32>,
    /// Minimum remaining (cost, formula count) per state.
    memo: BTreeMap<StateKey, Option<(u64, u32)>>,
}

impl Search<'_> {
    fn key(terms: &[Term]) -> StateKey {
        let mut key: StateKey = terms.iter().map(|t| (t.ops, t.summed)).collect();
        key.sort_unstable();
        key
    }

    fn is_goal(&self, terms: &[Term]) -> bool {
        terms.len() == 1 && {
            let t = &terms[0];
            t.letters.len() == self.target.len()
                && t.letters.iter().all(|&l| self.target.contains(l))
        }
    }

    /// Letters of term `i` that may be summed now: contracted letters
    /// whose every using operand is inside the term and that were not
    /// summed yet.
    fn summable(&self, terms: &[Term], i: usize) -> Vec<Letter> {
        let t = &terms[i];
        t.letters
            .iter()
            .copied()
            .filter(|&l| {
                !self.target.contains(l) && (self.letter_ops[&l] & !t.ops) == 0
            })
            .collect()
    }

    /// Enumerates the moves from a state: every pairwise multiplication
    /// and every legal single-letter summation.
    fn moves(&self, terms: &[Term]) -> Vec<Move> {
        let mut out = Vec::new();
        for i in 0..terms.len() {
            for l in self.summable(terms, i) {
                out.push(Move::Sum { term: i, letter: l });
            }
            for j in (i + 1)..terms.len() {
                out.push(Move::Multiply { left: i, right: j });
            }
        }
        out
    }

    /// Applies a move, returning the successor terms, the move's cost,
    /// and the new formula's result index string.
    fn apply(
        &self,
        terms: &[Term],
        mv: &Move,
        with_nodes: bool,
    ) -> Result<(Vec<Term>, u64, IndexString), StrengthError> {
        let mut next: Vec<Term> = Vec::with_capacity(terms.len());
        match *mv {
            Move::Multiply { left, right } => {
                let (a, b) = (&terms[left], &terms[right]);
                let pattern = a.pattern.and_product(&b.pattern)?;
                let mut letters: Vec<Letter> = a.letters.clone();
                for &l in &b.letters {
                    if !letters.contains(&l) {
                        letters.push(l);
                    }
                }
                letters.sort_by_key(|&l| letter_rank(l).unwrap());
                let result = IndexString::from_letters(&letters);
                let cost = pattern.nnz();
                let node = with_nodes.then(|| {
                    let (ln, rn) = (a.node.clone().unwrap(), b.node.clone().unwrap());
                    Box::new(Node {
                        kind: NodeKind::Product { left: ln, right: rn },
                        indices: result.clone(),
                        spp: Some(self.materialize(&pattern, &result)),
                        eqspp: None,
                    })
                });
                next.push(Term {
                    ops: a.ops | b.ops,
                    summed: a.summed | b.summed,
                    letters,
                    pattern,
                    node,
                });
                for (k, t) in terms.iter().enumerate() {
                    if k != left && k != right {
                        next.push(t.clone());
                    }
                }
                Ok((next, cost, result))
            }
            Move::Sum { term, letter } => {
                let t = &terms[term];
                let before = t.pattern.nnz();
                let pattern = t.pattern.or_project_away(&[letter]);
                let after = pattern.nnz();
                let letters: Vec<Letter> =
                    t.letters.iter().copied().filter(|&l| l != letter).collect();
                let result = IndexString::from_letters(&letters);
                let node = with_nodes.then(|| {
                    Box::new(Node {
                        kind: NodeKind::IndexSum {
                            letter,
                            child: t.node.clone().unwrap(),
                        },
                        indices: result.clone(),
                        spp: Some(self.materialize(&pattern, &result)),
                        eqspp: None,
                    })
                });
                next.push(Term {
                    ops: t.ops,
                    summed: t.summed | (1u64 << self.letter_bit[&letter]),
                    letters,
                    pattern,
                    node,
                });
                for (k, other) in terms.iter().enumerate() {
                    if k != term {
                        next.push(other.clone());
                    }
                }
                Ok((next, before - after, result))
            }
        }
    }

    fn materialize(&self, pattern: &FactorPattern, order: &IndexString) -> SparsityPattern {
        let sizes: Vec<usize> =
            order.letters().iter().map(|&l| self.space.size(l).unwrap()).collect();
        pattern.materialize(order, &sizes)
    }

    /// Minimum remaining (cost, formula count) from a state.
    fn best(&mut self, terms: &[Term]) -> Result<Option<(u64, u32)>, StrengthError> {
        if self.is_goal(terms) {
            return Ok(Some((0, 0)));
        }
        let key = Self::key(terms);
        if let Some(hit) = self.memo.get(&key) {
            return Ok(*hit);
        }
        // Mark in-progress to cut cycles (none exist: every move makes
        // strict progress, so plain recursion is safe).
        let mut best: Option<(u64, u32)> = None;
        for mv in self.moves(terms) {
            let (next, cost, _) = self.apply(terms, &mv, false)?;
            if let Some((rest, count)) = self.best(&next)? {
                let cand = (cost + rest, count + 1);
                if best.map(|b| cand < b).unwrap_or(true) {
                    best = Some(cand);
                }
            }
        }
        self.memo.insert(key, best);
        Ok(best)
    }
}

#[derive(Debug, Clone)]
enum Move {
    Multiply { left: usize, right: usize },
    Sum { term: usize, letter: Letter },
}

/// Deterministic secondary ordering of moves for tie-breaking.
fn move_key(mv: &Move) -> (u8, usize, usize) {
    match *mv {
        Move::Sum { term, letter } => (0, term, letter as usize),
        Move::Multiply { left, right } => (1, left, right),
    }
}

/// The result of reducing one Einsum: the operation tree, the schedule,
/// and its total sparse cost.
pub struct Reduction {
    pub tree: Node,
    pub schedule: Schedule,
}

/// Reduces an Einsum node (with equivalent-sparsity-masked operand
/// patterns) to an operation-minimal binary tree of Product and
/// IndexSum nodes. Single operands that already match the target fall
/// through unchanged.
pub fn reduce(
    operands: &[(&Node, &SparsityPattern)],
    target: &IndexString,
) -> Result<Reduction, StrengthError> {
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(n, p)| (p.extents(), &n.indices)).collect();
    let space = build_index_space(&pairs)?;

    let mut letter_bit = BTreeMap::new();
    let mut letter_ops: BTreeMap<Letter, u32> = BTreeMap::new();
    for (bit, &l) in space.letters().iter().enumerate() {
        letter_bit.insert(l, bit as u32);
        let mut mask = 0u32;
        for (k, (n, _)) in operands.iter().enumerate() {
            if n.indices.contains(l) {
                mask |= 1 << k;
            }
        }
        letter_ops.insert(l, mask);
    }

    let initial: Vec<Term> = operands
        .iter()
        .enumerate()
        .map(|(k, (n, p))| Term {
            ops: 1 << k,
            summed: 0,
            letters: n.indices.letters().to_vec(),
            pattern: FactorPattern::from_pattern(&n.indices, p),
            node: Some(Box::new((*n).clone())),
        })
        .collect();

    let mut search = Search {
        space: &space,
        target,
        letter_bit,
        letter_ops,
        memo: BTreeMap::new(),
    };

    let Some((total_cost, total_count)) = search.best(&initial)? else {
        return Err(StrengthError::UnreachableTarget { target: format!("{target}") });
    };

    // Deterministic reconstruction: at each state take the move that
    // preserves (min cost, min count) and has the smallest result index
    // string; the move encoding breaks remaining ties.
    let mut terms = initial;
    let mut formulas: Vec<Formula> = Vec::new();
    let mut remaining = (total_cost, total_count);
    while !search.is_goal(&terms) {
        let mut chosen: Option<(Move, Vec<Term>, u64, IndexString, (u64, u32))> = None;
        for mv in search.moves(&terms) {
            let (next, cost, result) = search.apply(&terms, &mv, true)?;
            let Some((rest, count)) = search.best(&next)? else { continue };
            if (cost + rest, count + 1) != remaining {
                continue;
            }
            let better = match &chosen {
                None => true,
                Some((cmv, _, _, cresult, _)) => {
                    (&result, move_key(&mv)) < (cresult, move_key(cmv))
                }
            };
            if better {
                chosen = Some((mv, next, cost, result, (rest, count)));
            }
        }
        let (mv, next, cost, result, rest) =
            chosen.expect("an optimal continuation exists by construction");
        formulas.push(match mv {
            Move::Multiply { left, right } => Formula::Multiplication {
                left,
                right,
                result: result.clone(),
                nnz: next[0].pattern.nnz(),
            },
            Move::Sum { term, letter } => Formula::Summation {
                operand: term,
                letter,
                result: result.clone(),
                nnz: next[0].pattern.nnz(),
            },
        });
        let _ = cost;
        terms = next;
        remaining = rest;
    }

    let tree = *terms.into_iter().next().unwrap().node.unwrap();
    Ok(Reduction { tree, schedule: Schedule { formulas, cost: total_cost } })
}

/// Independent brute-force oracle: enumerates every binary association
/// tree over the operands and every valid placement of summations
/// (each node may sum any subset of the letters that became summable),
/// returning the global minimum cost. No memoization is shared with
/// [`reduce`].
pub fn exhaustive_oracle(
    operands: &[(&IndexString, &SparsityPattern)],
    target: &IndexString,
) -> Result<u64, StrengthError> {
    if operands.len() > ORACLE_MAX_OPERANDS {
        return Err(StrengthError::SizeLimitExceeded {
            what: "operand",
            size: operands.len(),
            limit: ORACLE_MAX_OPERANDS,
        });
    }
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(i, p)| (p.extents(), *i)).collect();
    let space = build_index_space(&pairs)?;
    if space.rank() > ORACLE_MAX_LETTERS {
        return Err(StrengthError::SizeLimitExceeded {
            what: "letter",
            size: space.rank(),
            limit: ORACLE_MAX_LETTERS,
        });
    }
    let letter_ops: BTreeMap<Letter, u32> = space
        .letters()
        .iter()
        .map(|&l| {
            let mut mask = 0u32;
            for (k, (i, _)) in operands.iter().enumerate() {
                if i.contains(l) {
                    mask |= 1 << k;
                }
            }
            (l, mask)
        })
        .collect();

    struct Outcome {
        pattern: FactorPattern,
        letters: Vec<Letter>,
        cost: u64,
    }

    // Enumerate (tree, placement) outcomes for an operand subset; the
    // callback receives each outcome. Summable letters not yet summed
    // may be deferred to an ancestor, so every subset of the currently
    // summable letters is tried.
    fn enumerate(
        mask: u32,
        operands: &[(&IndexString, &SparsityPattern)],
        letter_ops: &BTreeMap<Letter, u32>,
        target: &IndexString,
        f: &mut dyn FnMut(&Outcome) -> Result<(), StrengthError>,
    ) -> Result<(), StrengthError> {
        if mask.count_ones() == 1 {
            let k = mask.trailing_zeros() as usize;
            let (idx, p) = operands[k];
            let base = Outcome {
                pattern: FactorPattern::from_pattern(idx, p),
                letters: idx.letters().to_vec(),
                cost: 0,
            };
            return sum_subsets(&base, mask, letter_ops, target, f);
        }
        // Split the subset; fixing the lowest operand on the left halves
        // the enumeration (trees are unordered).
        let low = mask & mask.wrapping_neg();
        let rest = mask & !low;
        let mut sub = rest;
        loop {
            let left_mask = low | sub;
            let right_mask = mask & !left_mask;
            if right_mask != 0 {
                enumerate(left_mask, operands, letter_ops, target, &mut |l: &Outcome| {
                    enumerate(right_mask, operands, letter_ops, target, &mut |r: &Outcome| {
                        let pattern = l.pattern.and_product(&r.pattern)?;
                        let mut letters = l.letters.clone();
                        for &x in &r.letters {
                            if !letters.contains(&x) {
                                letters.push(x);
                            }
                        }
                        let cost = l.cost + r.cost + pattern.nnz();
                        let merged = Outcome { pattern, letters, cost };
                        sum_subsets(&merged, mask, letter_ops, target, f)
                    })
                })?;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        Ok(())
    }

    /// Sums every subset of the currently-summable letters of an
    /// outcome, forwarding each variant.
    fn sum_subsets(
        base: &Outcome,
        ops_mask: u32,
        letter_ops: &BTreeMap<Letter, u32>,
        target: &IndexString,
        f: &mut dyn FnMut(&Outcome) -> Result<(), StrengthError>,
    ) -> Result<(), StrengthError> {
        let summable: Vec<Letter> = base
            .letters
            .iter()
            .copied()
            .filter(|&l| !target.contains(l) && (letter_ops[&l] & !ops_mask) == 0)
            .collect();
        for choice in 0u32..(1 << summable.len()) {
            let chosen: Vec<Letter> = summable
                .iter()
                .enumerate()
                .filter(|(i, _)| choice >> i & 1 == 1)
                .map(|(_, &l)| l)
                .collect();
            if chosen.is_empty() {
                f(base)?;
                continue;
            }
            let before = base.pattern.nnz();
            let pattern = base.pattern.or_project_away(&chosen);
            let after = pattern.nnz();
            let letters: Vec<Letter> =
                base.letters.iter().copied().filter(|l| !chosen.contains(l)).collect();
            f(&Outcome { pattern, letters, cost: base.cost + (before - after) })?;
        }
        Ok(())
    }

    let full = (1u32 << operands.len()) - 1;
    let mut best: Option<u64> = None;
    if operands.len() == 1 {
        // Degenerate: only summations apply.
        enumerate(full, operands, &letter_ops, target, &mut |o| {
            if o.letters.len() == target.len() && o.letters.iter().all(|&l| target.contains(l)) {
                best = Some(best.map_or(o.cost, |b| b.min(o.cost)));
            }
            Ok(())
        })?;
    } else {
        enumerate(full, operands, &letter_ops, target, &mut |o| {
            if o.letters.len() == target.len() && o.letters.iter().all(|&l| target.contains(l)) {
                best = Some(best.map_or(o.cost, |b| b.min(o.cost)));
            }
            Ok(())
        })?;
    }
    best.ok_or(StrengthError::UnreachableTarget { target: format!("{target}") })
}

/// Renders the multiplicative structure of a reduced tree with leaves
/// named, ignoring IndexSum nesting: `((A B) C)`. Children are ordered
/// lexicographically, so the rendering identifies the unordered
/// parenthesization.
pub fn parenthesization(node: &Node) -> String {
    match &node.kind {
        NodeKind::Leaf { tensor } => tensor.clone(),
        NodeKind::IndexSum { child, .. } => parenthesization(child),
        NodeKind::Product { left, right } | NodeKind::Contraction { left, right, .. } => {
            let (a, b) = (parenthesization(left), parenthesization(right));
            if a <= b {
                format!("({a} {b})")
            } else {
                format!("({b} {a})")
            }
        }
        NodeKind::ScalarMul { child, .. } | NodeKind::Permute { child } => parenthesization(child),
        NodeKind::Add { .. } | NodeKind::Einsum { .. } => String::from("?"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::Node;

    fn idx(s: &str) -> IndexString {
        IndexString::new(s).unwrap()
    }

    fn leaf(name: &str, indices: &str, spp: SparsityPattern) -> Node {
        let mut n = Node::leaf(name, idx(indices));
        n.spp = Some(spp);
        n
    }

    fn reduce_leaves(leaves: &[Node], target: &str) -> Reduction {
        let ops: Vec<(&Node, &SparsityPattern)> =
            leaves.iter().map(|n| (n, n.spp.as_ref().unwrap())).collect();
        reduce(&ops, &idx(target)).unwrap()
    }

    fn oracle_leaves(leaves: &[Node], target: &str) -> u64 {
        let ops: Vec<(&IndexString, &SparsityPattern)> =
            leaves.iter().map(|n| (&n.indices, n.spp.as_ref().unwrap())).collect();
        exhaustive_oracle(&ops, &idx(target)).unwrap()
    }

    #[test]
    fn dense_2x2_matmul_costs_12() {
        // Product T_ikj costs 8 multiplications, the summation over k
        // costs 8 - 4 = 4 additions.
        let a = leaf("A", "ik", SparsityPattern::dense(&[2, 2]));
        let b = leaf("B", "kj", SparsityPattern::dense(&[2, 2]));
        let red = reduce_leaves(&[a.clone(), b.clone()], "ij");
        assert_eq!(red.schedule.cost, 12);
        assert_eq!(oracle_leaves(&[a, b], "ij"), 12);
    }

    #[test]
    fn summation_over_diagonal_costs_zero() {
        // sum_j of a diagonal 4x4: one term per output row.
        let d = leaf("D", "ij", SparsityPattern::diagonal(4));
        let red = reduce_leaves(&[d], "i");
        assert_eq!(red.schedule.cost, 0);
        assert_eq!(red.schedule.formulas.len(), 1);
        assert!(matches!(red.schedule.formulas[0], Formula::Summation { letter: b'j', .. }));
    }

    #[test]
    fn row_vector_times_dense_costs_two() {
        // K = (1 0) row pattern times dense 2x2: product nnz = 2.
        let k = leaf("K", "ik", SparsityPattern::from_nonzeros(&[1, 2], &[&[0, 0]]));
        let q = leaf("Q", "kj", SparsityPattern::dense(&[2, 2]));
        let red = reduce_leaves(&[k, q], "ij");
        // Multiplication costs nnz(T_ijk) = 2, summation 2 - 2 = 0.
        assert_eq!(red.schedule.cost, 2);
    }

    #[test]
    fn single_operand_einsum_is_one_summation() {
        let a = leaf("A", "ik", SparsityPattern::dense(&[3, 2]));
        let red = reduce_leaves(&[a], "i");
        assert_eq!(red.schedule.formulas.len(), 1);
        assert!(matches!(red.tree.kind, NodeKind::IndexSum { letter: b'k', .. }));
    }

    #[test]
    fn four_operand_motivating_example_at_n2() {
        // S_abij = sum A_acik B_befl C_dfjk D_cdel, all extents N.
        for n in [2usize, 3] {
            let a = leaf("A", "acik", SparsityPattern::dense(&[n; 4]));
            let b = leaf("B", "befl", SparsityPattern::dense(&[n; 4]));
            let c = leaf("C", "dfjk", SparsityPattern::dense(&[n; 4]));
            let d = leaf("D", "cdel", SparsityPattern::dense(&[n; 4]));
            let red = reduce_leaves(&[a.clone(), b.clone(), c.clone(), d.clone()], "abij");
            let oracle = oracle_leaves(&[a, b, c, d], "abij");
            assert_eq!(red.schedule.cost, oracle);
            let bound = 6 * (n as u64).pow(6);
            assert!(red.schedule.cost <= bound, "cost {} > 6N^6 {bound}", red.schedule.cost);
        }
    }

    #[test]
    fn matrix_chain_agrees_with_classic_dp() {
        // (10x2)(2x10)(10x5) dense: compare against the textbook
        // matrix-chain dynamic program extended with the add counts of
        // the sparse cost model (mults = m*k*n, adds = m*k*n - m*n).
        let a = leaf("A", "ij", SparsityPattern::dense(&[10, 2]));
        let b = leaf("B", "jk", SparsityPattern::dense(&[2, 10]));
        let c = leaf("C", "kl", SparsityPattern::dense(&[10, 5]));
        let red = reduce_leaves(&[a.clone(), b.clone(), c.clone()], "il");

        // Independent classic chain DP over split points.
        let dims = [10u64, 2, 10, 5];
        let cost2 = |m: u64, k: u64, n: u64| m * k * n + (m * k * n - m * n);
        let ab_first = cost2(dims[0], dims[1], dims[2]) + cost2(dims[0], dims[2], dims[3]);
        let bc_first = cost2(dims[1], dims[2], dims[3]) + cost2(dims[0], dims[1], dims[3]);
        let expect = ab_first.min(bc_first);
        assert_eq!(red.schedule.cost, expect);
        assert_eq!(oracle_leaves(&[a, b, c], "il"), expect);
        // For these dims (AB)C is worse: 10*2*10 -> then 10*10*5;
        // A(BC) costs 2*10*5 then 10*2*5.
        assert_eq!(parenthesization(&red.tree), "((B C) A)");
    }

    #[test]
    fn two_operand_case_is_forced() {
        let a = leaf("A", "ix", SparsityPattern::dense(&[2, 3]));
        let b = leaf("B", "xj", SparsityPattern::dense(&[3, 2]));
        let red = reduce_leaves(&[a.clone(), b.clone()], "ij");
        assert_eq!(red.schedule.cost, oracle_leaves(&[a, b], "ij"));
        assert_eq!(parenthesization(&red.tree), "(A B)");
    }

    #[test]
    fn hadamard_letters_stay_unsummed() {
        // C_i = A_i * B_i: i is shared by both operands and the result.
        let a = leaf("A", "i", SparsityPattern::dense(&[4]));
        let b = leaf("B", "i", SparsityPattern::dense(&[4]));
        let red = reduce_leaves(&[a, b], "i");
        assert_eq!(red.schedule.formulas.len(), 1);
        assert_eq!(red.schedule.cost, 4);
        assert!(matches!(red.tree.kind, NodeKind::Product { .. }));
    }

    #[test]
    fn masked_operands_never_cost_more() {
        // Masking with the equivalent sparsity pattern cannot increase
        // the minimal schedule cost.
        let dense_k = leaf("K", "lk", SparsityPattern::dense(&[6, 6]));
        let mut masked = SparsityPattern::zeros(&[6, 6]);
        for r in 0..3 {
            for c in 0..6 {
                masked.set(&[r, c], true);
            }
        }
        let masked_k = leaf("K", "lk", masked);
        let i = leaf("I", "slq", SparsityPattern::dense(&[2, 6, 3]));
        let a = leaf("Aq", "qp", SparsityPattern::dense(&[3, 3]));
        let full = reduce_leaves(&[i.clone(), dense_k, a.clone()], "skp");
        let shrunk = reduce_leaves(&[i, masked_k, a], "skp");
        assert!(shrunk.schedule.cost <= full.schedule.cost);
    }

    #[test]
    fn oracle_caps_are_enforced() {
        let leaves: Vec<Node> = (0..8)
            .map(|i| {
                leaf(
                    core::str::from_utf8(&[b'A' + i as u8]).unwrap(),
                    core::str::from_utf8(&[b'a' + i as u8]).unwrap(),
                    SparsityPattern::dense(&[2]),
                )
            })
            .collect();
        let ops: Vec<(&IndexString, &SparsityPattern)> =
            leaves.iter().map(|n| (&n.indices, n.spp.as_ref().unwrap())).collect();
        let err = exhaustive_oracle(&ops, &idx("abcdefgh")).unwrap_err();
        assert!(matches!(err, StrengthError::SizeLimitExceeded { what: "operand", .. }));
    }
}
