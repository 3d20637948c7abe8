//! Equivalent sparsity patterns (EQSPPs).
//!
//! For a `*`-expression over tensors `T^1..T^n`, the EQSPP of each
//! operand is the minimal mask that leaves the result unchanged under
//! the no-cancellation assumption. It is computed as a boolean Einstein
//! sum of all operand patterns, projected back onto each operand:
//! `Theta_hat^k_q = OR_{l in R_k(q)} Theta^1 AND .. AND Theta^n`.
//!
//! Evaluating that sum point-by-point over the global index space is
//! exact but far too slow for larger kernels, so [`FactorPattern`]
//! keeps patterns factored into independent letter groups (an outer
//! product of small grids). AND-products merge only the groups that
//! actually share letters; OR-projections act per group. The factored
//! route is an order-equivalent schedule of the defining sum and is
//! validated against the direct evaluation in tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::index::{build_index_space, letter_rank, IndexError, IndexString, Letter};
use crate::pattern::SparsityPattern;

/// Largest grid a merged factor may materialize.
const FACTOR_CELL_LIMIT: u128 = 1 << 24;

/// Brute-force cap for [`check_minimality`].
const MINIMALITY_POINT_LIMIT: u128 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
enum FactorKind {
    Dense,
    Grid(SparsityPattern),
}

/// One group of mutually dependent letters.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Factor {
    letters: Vec<Letter>,
    sizes: Vec<usize>,
    kind: FactorKind,
}

impl Factor {
    fn nnz(&self) -> u128 {
        match &self.kind {
            FactorKind::Dense => self.sizes.iter().map(|&s| s as u128).product(),
            FactorKind::Grid(g) => g.nnz() as u128,
        }
    }

    fn get(&self, point: &[usize]) -> bool {
        match &self.kind {
            FactorKind::Dense => true,
            FactorKind::Grid(g) => g.get(point),
        }
    }

    fn interval(&self, letter: Letter) -> (usize, usize) {
        let d = self.letters.iter().position(|&l| l == letter).unwrap();
        match &self.kind {
            FactorKind::Dense => (0, self.sizes[d]),
            FactorKind::Grid(g) => g.bounding_box()[d],
        }
    }
}

/// A boolean tensor represented as an outer product of factors over
/// disjoint letter groups. `zero` marks the all-zero pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorPattern {
    zero: bool,
    factors: Vec<Factor>,
}

impl FactorPattern {
    /// The empty product: a scalar `true` with no letters.
    pub fn one() -> Self {
        FactorPattern { zero: false, factors: Vec::new() }
    }

    /// Wraps a concrete pattern, splitting it into independent 1-letter
    /// factors when it equals the outer product of its axis projections.
    pub fn from_pattern(indices: &IndexString, spp: &SparsityPattern) -> Self {
        assert_eq!(indices.len(), spp.rank());
        if spp.is_zero() {
            return FactorPattern { zero: true, factors: Vec::new() };
        }
        if spp.is_dense() {
            let factors = indices
                .letters()
                .iter()
                .zip(spp.extents())
                .map(|(&l, &s)| Factor { letters: vec![l], sizes: vec![s], kind: FactorKind::Dense })
                .collect();
            return Self::normalized(factors);
        }
        if spp.rank() == 1 {
            return Self::normalized(vec![Factor {
                letters: indices.letters().to_vec(),
                sizes: spp.extents().to_vec(),
                kind: FactorKind::Grid(spp.clone()),
            }]);
        }
        // A pattern is separable iff prod_d nnz(proj_d) == nnz: the
        // outer product of the axis projections is always a superset.
        let projections: Vec<SparsityPattern> = (0..spp.rank())
            .map(|d| {
                let mut p = spp.clone();
                for r in (0..spp.rank()).rev() {
                    if r != d {
                        p = p.or_project_dim(r);
                    }
                }
                p
            })
            .collect();
        let prod: u128 = projections.iter().map(|p| p.nnz() as u128).product();
        if prod == spp.nnz() as u128 {
            let factors = indices
                .letters()
                .iter()
                .zip(projections)
                .zip(spp.extents())
                .map(|((&l, p), &s)| {
                    let kind = if p.is_dense() { FactorKind::Dense } else { FactorKind::Grid(p) };
                    Factor { letters: vec![l], sizes: vec![s], kind }
                })
                .collect();
            Self::normalized(factors)
        } else {
            Self::normalized(vec![Factor {
                letters: indices.letters().to_vec(),
                sizes: spp.extents().to_vec(),
                kind: FactorKind::Grid(spp.clone()),
            }])
        }
    }

    fn normalized(mut factors: Vec<Factor>) -> Self {
        if factors.iter().any(|f| f.nnz() == 0) {
            return FactorPattern { zero: true, factors: Vec::new() };
        }
        factors.sort_by_key(|f| letter_rank(f.letters[0]).unwrap());
        FactorPattern { zero: false, factors }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// All letters, lexically ordered.
    pub fn letters(&self) -> Vec<Letter> {
        let mut out: Vec<Letter> =
            self.factors.iter().flat_map(|f| f.letters.iter().copied()).collect();
        out.sort_by_key(|&l| letter_rank(l).unwrap());
        out
    }

    pub fn size_of(&self, letter: Letter) -> Option<usize> {
        self.factors
            .iter()
            .find_map(|f| f.letters.iter().position(|&l| l == letter).map(|d| f.sizes[d]))
    }

    /// Number of nonzero entries (product over factors).
    pub fn nnz(&self) -> u64 {
        if self.zero {
            return 0;
        }
        let n: u128 = self.factors.iter().map(|f| f.nnz()).product();
        u64::try_from(n).expect("nonzero count fits u64 at supported sizes")
    }

    /// Bounding interval of one letter, `(0, 0)` for the zero pattern.
    pub fn interval(&self, letter: Letter) -> Option<(usize, usize)> {
        if self.zero {
            return Some((0, 0));
        }
        self.factors.iter().find(|f| f.letters.contains(&letter)).map(|f| f.interval(letter))
    }

    /// AND-product of two factored patterns; letter groups that overlap
    /// get merged into joint grids.
    pub fn and_product(&self, other: &FactorPattern) -> Result<FactorPattern, IndexError> {
        if self.zero || other.zero {
            return Ok(FactorPattern { zero: true, factors: Vec::new() });
        }
        let all: Vec<&Factor> = self.factors.iter().chain(other.factors.iter()).collect();
        // Group factors into connected components through shared letters.
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut parent: Vec<usize> = (0..all.len()).collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                if all[i].letters.iter().any(|l| all[j].letters.contains(l)) {
                    let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut factors: Vec<Factor> = Vec::new();
        let mut done = vec![false; all.len()];
        for i in 0..all.len() {
            if done[i] {
                continue;
            }
            let r = root(&mut parent, i);
            let members: Vec<&Factor> = (0..all.len())
                .filter(|&j| root(&mut parent, j) == r)
                .inspect(|&j| done[j] = true)
                .map(|j| all[j])
                .collect();
            if members.len() == 1 {
                factors.push(members[0].clone());
                continue;
            }
            let (letters, sizes, grid) = merge_factors(&members)?;
            if grid.is_zero() {
                return Ok(FactorPattern { zero: true, factors: Vec::new() });
            }
            // Merged grids often re-separate (e.g. interval x interval).
            let idx = IndexString::from_letters(&letters);
            factors.extend(FactorPattern::from_pattern(&idx, &grid).factors);
            let _ = sizes;
        }
        Ok(Self::normalized(factors))
    }

    /// OR-projection that removes the given letters; distributes over
    /// the outer product, so each factor projects independently.
    pub fn or_project_away(&self, letters: &[Letter]) -> FactorPattern {
        if self.zero {
            return self.clone();
        }
        let mut factors = Vec::new();
        for f in &self.factors {
            let keep: Vec<usize> =
                (0..f.letters.len()).filter(|&d| !letters.contains(&f.letters[d])).collect();
            if keep.len() == f.letters.len() {
                factors.push(f.clone());
                continue;
            }
            if keep.is_empty() {
                // Factors keep nnz >= 1, so the projection is `true`.
                continue;
            }
            let letters_kept: Vec<Letter> = keep.iter().map(|&d| f.letters[d]).collect();
            let sizes_kept: Vec<usize> = keep.iter().map(|&d| f.sizes[d]).collect();
            match &f.kind {
                FactorKind::Dense => factors.push(Factor {
                    letters: letters_kept,
                    sizes: sizes_kept,
                    kind: FactorKind::Dense,
                }),
                FactorKind::Grid(g) => {
                    let mut g = g.clone();
                    for d in (0..f.letters.len()).rev() {
                        if !keep.contains(&d) {
                            g = g.or_project_dim(d);
                        }
                    }
                    let idx = IndexString::from_letters(&letters_kept);
                    factors.extend(FactorPattern::from_pattern(&idx, &g).factors);
                }
            }
        }
        Self::normalized(factors)
    }

    /// Materializes the pattern over the given letter order with the
    /// given extents. The order must cover the pattern's letters.
    pub fn materialize(&self, order: &IndexString, sizes: &[usize]) -> SparsityPattern {
        assert_eq!(order.len(), sizes.len());
        if self.zero {
            return SparsityPattern::zeros(sizes);
        }
        let mut out = SparsityPattern::zeros(sizes);
        let maps: Vec<Vec<usize>> = self
            .factors
            .iter()
            .map(|f| f.letters.iter().map(|&l| order.position(l).unwrap()).collect())
            .collect();
        let mut fpoint: Vec<usize> = Vec::new();
        crate::index::for_each_point(sizes, |p| {
            let mut on = true;
            for (f, map) in self.factors.iter().zip(&maps) {
                fpoint.clear();
                fpoint.extend(map.iter().map(|&d| p[d]));
                if !f.get(&fpoint) {
                    on = false;
                    break;
                }
            }
            if on {
                out.set(p, true);
            }
        });
        out
    }
}

/// Materializes the AND of several factors over the union of their
/// letters (lexically ordered). Returns `(letters, sizes, grid)`.
fn merge_factors(
    members: &[&Factor],
) -> Result<(Vec<Letter>, Vec<usize>, SparsityPattern), IndexError> {
    let mut letters: Vec<Letter> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for f in members {
        for (d, &l) in f.letters.iter().enumerate() {
            if !letters.contains(&l) {
                letters.push(l);
                sizes.push(f.sizes[d]);
            }
        }
    }
    let mut order: Vec<usize> = (0..letters.len()).collect();
    order.sort_by_key(|&i| letter_rank(letters[i]).unwrap());
    let letters: Vec<Letter> = order.iter().map(|&i| letters[i]).collect();
    let sizes: Vec<usize> = order.iter().map(|&i| sizes[i]).collect();
    let cells: u128 = sizes.iter().map(|&s| s as u128).product();
    if cells > FACTOR_CELL_LIMIT {
        return Err(IndexError::SizeLimitExceeded { size: cells, limit: FACTOR_CELL_LIMIT });
    }
    let maps: Vec<Vec<usize>> = members
        .iter()
        .map(|f| {
            f.letters.iter().map(|&l| letters.iter().position(|&x| x == l).unwrap()).collect()
        })
        .collect();
    let mut grid = SparsityPattern::zeros(&sizes);
    let mut fpoint: Vec<usize> = Vec::new();
    crate::index::for_each_point(&sizes, |p| {
        let mut on = true;
        for (f, map) in members.iter().zip(&maps) {
            fpoint.clear();
            fpoint.extend(map.iter().map(|&d| p[d]));
            if !f.get(&fpoint) {
                on = false;
                break;
            }
        }
        if on {
            grid.set(p, true);
        }
    });
    Ok((letters, sizes, grid))
}

/// Per-operand equivalent sparsity patterns plus the masked result
/// pattern of the operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EqsppResult {
    pub operands: Vec<SparsityPattern>,
    pub result: SparsityPattern,
}

/// Computes equivalent sparsity patterns for all operand occurrences of
/// a `*`-expression, and the masked result pattern over the target
/// letters.
pub fn compute_eqspp(
    operands: &[(&SparsityPattern, &IndexString)],
    target: &IndexString,
) -> Result<EqsppResult, IndexError> {
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(p, idx)| (p.extents(), *idx)).collect();
    let space = build_index_space(&pairs)?;
    for &l in target.letters() {
        if space.position(l).is_none() {
            return Err(IndexError::ResultIndexNotInOperands { letter: l as char });
        }
    }
    let mut product = FactorPattern::one();
    for (p, idx) in operands {
        product = product.and_product(&FactorPattern::from_pattern(idx, p))?;
    }
    let all_letters = space.letters().to_vec();
    let masked = |keep: &IndexString| -> SparsityPattern {
        let away: Vec<Letter> =
            all_letters.iter().copied().filter(|l| !keep.contains(*l)).collect();
        let sizes = space.extents_of(keep);
        product.or_project_away(&away).materialize(keep, &sizes)
    };
    Ok(EqsppResult {
        operands: operands.iter().map(|(_, idx)| masked(idx)).collect(),
        result: masked(target),
    })
}

/// Brute-force minimality oracle: true iff flipping any single nonzero
/// of any operand EQSPP to zero removes at least one surviving product
/// term, which changes the result under no cancellation. Iterates the
/// full global index space, so it is capped; a test oracle, not part of
/// the pipeline.
pub fn check_minimality(
    operands: &[(&SparsityPattern, &IndexString)],
    _target: &IndexString,
    result: &EqsppResult,
) -> Result<bool, IndexError> {
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(p, idx)| (p.extents(), *idx)).collect();
    let space = build_index_space(&pairs)?;
    let points = space.point_count();
    if points > MINIMALITY_POINT_LIMIT {
        return Err(IndexError::SizeLimitExceeded { size: points, limit: MINIMALITY_POINT_LIMIT });
    }
    let projections: Vec<_> = operands.iter().map(|(_, idx)| space.projection(idx)).collect();
    let mut witnessed: Vec<SparsityPattern> =
        result.operands.iter().map(|p| SparsityPattern::zeros(p.extents())).collect();
    let mut tpoints: Vec<Vec<usize>> = vec![Vec::new(); operands.len()];
    space.for_each_point(|g| {
        let mut alive = true;
        for (k, masked) in result.operands.iter().enumerate() {
            projections[k].apply(g, &mut tpoints[k]);
            if !masked.get(&tpoints[k]) {
                alive = false;
                break;
            }
        }
        if alive {
            for (k, w) in witnessed.iter_mut().enumerate() {
                w.set(&tpoints[k], true);
            }
        }
    });
    for (masked, w) in result.operands.iter().zip(&witnessed) {
        if !masked.is_subset_of(w) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::spp_of_product;

    fn idx(s: &str) -> IndexString {
        IndexString::new(s).unwrap()
    }

    fn block_operands() -> (SparsityPattern, SparsityPattern, SparsityPattern) {
        // (K1 0) * Q * (A1; 0)^T with 2x2 blocks of 2x2 entries:
        // K is 2x4 with columns 0..2 nonzero, Q is 4x4 dense, and the
        // third operand indexed ['lj'] is 4x2 with rows 0..2 nonzero.
        let mut k = SparsityPattern::zeros(&[2, 4]);
        let mut a = SparsityPattern::zeros(&[4, 2]);
        for r in 0..2 {
            for c in 0..2 {
                k.set(&[r, c], true);
                a.set(&[r, c], true);
            }
        }
        (k, SparsityPattern::dense(&[4, 4]), a)
    }

    #[test]
    fn block_example_masks_q_to_top_left() {
        let (k, q, a) = block_operands();
        let ops = [(&k, &idx("ik")), (&q, &idx("kl")), (&a, &idx("lj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let out = compute_eqspp(&ops, &idx("ij")).unwrap();
        let mut expect = SparsityPattern::zeros(&[4, 4]);
        for r in 0..2 {
            for c in 0..2 {
                expect.set(&[r, c], true);
            }
        }
        assert_eq!(out.operands[1], expect);
        assert!(check_minimality(&ops, &idx("ij"), &out).unwrap());
    }

    #[test]
    fn dense_operands_are_left_unchanged() {
        let a = SparsityPattern::dense(&[2, 3]);
        let b = SparsityPattern::dense(&[3, 2]);
        let ops = [(&a, &idx("ik")), (&b, &idx("kj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let out = compute_eqspp(&ops, &idx("ij")).unwrap();
        assert_eq!(out.operands[0], a);
        assert_eq!(out.operands[1], b);
        assert!(out.result.is_dense());
        // Flipping any entry of a dense operand kills a product term
        // with no cancellation, so dense masks are already minimal.
        assert!(check_minimality(&ops, &idx("ij"), &out).unwrap());
    }

    #[test]
    fn first_rows_of_contracted_matrix_shrink_the_dof_tensor() {
        // Q_skp = I_slq K_lk A_qp where K has only the first 10 of 20
        // rows nonzero: the EQSPP of I is an S x 10 x 9 subtensor.
        let (s, b, bt, q) = (4, 20, 10, 9);
        let i = SparsityPattern::dense(&[s, b, q]);
        let mut k = SparsityPattern::zeros(&[b, b]);
        for r in 0..bt {
            for c in 0..b {
                k.set(&[r, c], true);
            }
        }
        let a = SparsityPattern::dense(&[q, q]);
        let ops = [(&i, &idx("slq")), (&k, &idx("lk")), (&a, &idx("qp"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let out = compute_eqspp(&ops, &idx("skp")).unwrap();
        assert_eq!(out.operands[0].bounding_box(), alloc::vec![(0, s), (0, bt), (0, q)]);
        assert_eq!(out.operands[0].nnz() as usize, s * bt * q);
    }

    #[test]
    fn factored_route_matches_direct_boolean_einsum() {
        // Schedule independence: the factored evaluation equals the
        // naive point-by-point evaluation of the defining formula.
        let mut state = 0x853c49e6748fea9bu64;
        let mut rng = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..40 {
            let e0 = 1 + (rng() % 3) as usize;
            let e1 = 1 + (rng() % 3) as usize;
            let e2 = 1 + (rng() % 3) as usize;
            let mut a = SparsityPattern::zeros(&[e0, e1]);
            let mut b = SparsityPattern::zeros(&[e1, e2]);
            for r in 0..e0 {
                for c in 0..e1 {
                    if rng() % 3 != 0 {
                        a.set(&[r, c], true);
                    }
                }
            }
            for r in 0..e1 {
                for c in 0..e2 {
                    if rng() % 3 != 0 {
                        b.set(&[r, c], true);
                    }
                }
            }
            let ops = [(&a, &idx("ik")), (&b, &idx("kj"))];
            let ops: Vec<(&SparsityPattern, &IndexString)> =
                ops.iter().map(|&(p, i)| (p, i)).collect();
            let out = compute_eqspp(&ops, &idx("ij")).unwrap();
            for (k, (p, i)) in ops.iter().enumerate() {
                let direct = spp_of_product(&ops, i).unwrap();
                assert_eq!(out.operands[k], direct, "operand {k}");
                assert!(out.operands[k].is_subset_of(p), "monotonicity");
            }
            assert_eq!(out.result, spp_of_product(&ops, &idx("ij")).unwrap());
        }
    }

    #[test]
    fn idempotence_of_masking() {
        let (k, q, a) = block_operands();
        let ops = [(&k, &idx("ik")), (&q, &idx("kl")), (&a, &idx("lj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let first = compute_eqspp(&ops, &idx("ij")).unwrap();
        let ops2 = [
            (&first.operands[0], &idx("ik")),
            (&first.operands[1], &idx("kl")),
            (&first.operands[2], &idx("lj")),
        ];
        let ops2: Vec<(&SparsityPattern, &IndexString)> =
            ops2.iter().map(|&(p, i)| (p, i)).collect();
        let second = compute_eqspp(&ops2, &idx("ij")).unwrap();
        assert_eq!(first.operands, second.operands);
        assert_eq!(first.result, second.result);
    }

    #[test]
    fn minimality_oracle_rejects_oversized_masks() {
        let (k, q, a) = block_operands();
        let ops = [(&k, &idx("ik")), (&q, &idx("kl")), (&a, &idx("lj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let mut out = compute_eqspp(&ops, &idx("ij")).unwrap();
        // Add a spurious nonzero that no surviving product term uses.
        out.operands[1].set(&[3, 3], true);
        assert!(!check_minimality(&ops, &idx("ij"), &out).unwrap());
    }

    #[test]
    fn minimality_cap_is_enforced() {
        let a = SparsityPattern::dense(&[64, 64]);
        let big = SparsityPattern::dense(&[64, 1 << 15]);
        let ops = [(&a, &idx("ik")), (&big, &idx("kj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let out = compute_eqspp(&ops, &idx("ij")).unwrap();
        assert!(matches!(
            check_minimality(&ops, &idx("ij"), &out),
            Err(IndexError::SizeLimitExceeded { .. })
        ));
    }

    #[test]
    fn zero_operand_zeroes_everything() {
        let a = SparsityPattern::zeros(&[2, 2]);
        let b = SparsityPattern::dense(&[2, 2]);
        let ops = [(&a, &idx("ik")), (&b, &idx("kj"))];
        let ops: Vec<(&SparsityPattern, &IndexString)> = ops.iter().map(|&(p, i)| (p, i)).collect();
        let out = compute_eqspp(&ops, &idx("ij")).unwrap();
        assert!(out.operands[1].is_zero());
        assert!(out.result.is_zero());
    }
}
