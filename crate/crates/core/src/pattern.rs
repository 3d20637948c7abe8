//! Boolean sparsity patterns stored as dense bit grids.
//!
//! Patterns are the substrate of the no-cancellation sparsity algebra:
//! `+` is read as OR and `*` as AND. Tensors are small by assumption, so
//! a dense bit grid per pattern is fine and compressed boolean formats
//! are unnecessary.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::index::{colmajor_offset, for_each_point};

/// A boolean tensor over a box of the given extents; bit storage is
/// column-major (first dimension fastest).
#[derive(Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    extents: Vec<usize>,
    bits: Vec<u64>,
}

impl SparsityPattern {
    fn with_bits(extents: &[usize], fill: bool) -> Self {
        let n: usize = extents.iter().product();
        let words = n.div_ceil(64);
        let mut bits = vec![if fill { !0u64 } else { 0u64 }; words];
        if fill && n % 64 != 0 {
            // Keep unused tail bits clear so nnz() can count words directly.
            *bits.last_mut().unwrap() = (1u64 << (n % 64)) - 1;
        }
        if n == 0 {
            bits.clear();
        }
        SparsityPattern { extents: extents.to_vec(), bits }
    }

    /// All-ones pattern.
    pub fn dense(extents: &[usize]) -> Self {
        Self::with_bits(extents, true)
    }

    /// All-zeros pattern.
    pub fn zeros(extents: &[usize]) -> Self {
        Self::with_bits(extents, false)
    }

    /// Pattern from a list of nonzero coordinates; duplicates are
    /// idempotent. Coordinates must lie inside the extents.
    pub fn from_nonzeros(extents: &[usize], nonzeros: &[&[usize]]) -> Self {
        let mut p = Self::zeros(extents);
        for &nz in nonzeros {
            p.set(nz, true);
        }
        p
    }

    /// Identity-like diagonal pattern on a square matrix.
    pub fn diagonal(n: usize) -> Self {
        let mut p = Self::zeros(&[n, n]);
        for i in 0..n {
            p.set(&[i, i], true);
        }
        p
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, point: &[usize]) -> bool {
        let off = colmajor_offset(&self.extents, point);
        self.bits[off / 64] >> (off % 64) & 1 == 1
    }

    pub fn get_linear(&self, off: usize) -> bool {
        self.bits[off / 64] >> (off % 64) & 1 == 1
    }

    pub fn set(&mut self, point: &[usize], value: bool) {
        let off = colmajor_offset(&self.extents, point);
        if value {
            self.bits[off / 64] |= 1 << (off % 64);
        } else {
            self.bits[off / 64] &= !(1 << (off % 64));
        }
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_dense(&self) -> bool {
        self.nnz() as usize == self.len()
    }

    pub fn is_zero(&self) -> bool {
        self.nnz() == 0
    }

    /// Element-wise OR with a pattern of identical extents.
    pub fn or_assign(&mut self, other: &SparsityPattern) {
        assert_eq!(self.extents, other.extents, "pattern extents must match");
        for (w, o) in self.bits.iter_mut().zip(&other.bits) {
            *w |= o;
        }
    }

    /// Element-wise AND with a pattern of identical extents.
    pub fn and_assign(&mut self, other: &SparsityPattern) {
        assert_eq!(self.extents, other.extents, "pattern extents must match");
        for (w, o) in self.bits.iter_mut().zip(&other.bits) {
            *w &= o;
        }
    }

    /// True when every nonzero of `self` is also nonzero in `other`.
    pub fn is_subset_of(&self, other: &SparsityPattern) -> bool {
        assert_eq!(self.extents, other.extents, "pattern extents must match");
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// Visits every nonzero coordinate, first dimension fastest.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(&[usize])) {
        for_each_point(&self.extents, |p| {
            if self.get(p) {
                f(p);
            }
        });
    }

    /// The pattern with dimensions reordered: dimension `d` of the
    /// result reads dimension `perm[d]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> SparsityPattern {
        assert_eq!(perm.len(), self.rank());
        let extents: Vec<usize> = perm.iter().map(|&d| self.extents[d]).collect();
        let mut out = SparsityPattern::zeros(&extents);
        let mut src = vec![0usize; self.rank()];
        for_each_point(&extents, |p| {
            for (d, &s) in perm.iter().enumerate() {
                src[s] = p[d];
            }
            if self.get(&src) {
                out.set(p, true);
            }
        });
        out
    }

    /// Transposed pattern of a rank-2 pattern.
    pub fn transposed(&self) -> SparsityPattern {
        assert_eq!(self.rank(), 2, "transpose is defined for matrices");
        self.permuted(&[1, 0])
    }

    /// Tightest axis-aligned half-open box containing all nonzeros. An
    /// all-zero pattern yields the empty box `[0, 0)` on every axis.
    pub fn bounding_box(&self) -> Vec<(usize, usize)> {
        let mut lo = vec![usize::MAX; self.rank()];
        let mut hi = vec![0usize; self.rank()];
        self.for_each_nonzero(|p| {
            for d in 0..p.len() {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d] + 1);
            }
        });
        if hi.iter().all(|&h| h == 0) {
            return vec![(0, 0); self.rank()];
        }
        lo.into_iter().zip(hi).collect()
    }

    /// OR-projection away from one dimension: result rank is one less,
    /// entry nonzero iff any slice along `dim` is nonzero there.
    pub fn or_project_dim(&self, dim: usize) -> SparsityPattern {
        assert!(dim < self.rank());
        let mut extents = self.extents.clone();
        extents.remove(dim);
        let mut out = SparsityPattern::zeros(&extents);
        let mut reduced = Vec::with_capacity(extents.len());
        self.for_each_nonzero(|p| {
            reduced.clear();
            reduced.extend(p.iter().enumerate().filter(|&(d, _)| d != dim).map(|(_, &i)| i));
            out.set(&reduced, true);
        });
        out
    }
}

impl fmt::Debug for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SparsityPattern{:?} nnz={}", self.extents, self.nnz())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_zero_counts() {
        let d = SparsityPattern::dense(&[3, 5]);
        assert_eq!(d.nnz(), 15);
        assert!(d.is_dense());
        let z = SparsityPattern::zeros(&[3, 5]);
        assert_eq!(z.nnz(), 0);
        assert!(z.is_zero());
    }

    #[test]
    fn set_get_roundtrip_and_idempotent_duplicates() {
        let p = SparsityPattern::from_nonzeros(&[2, 2], &[&[0, 0], &[1, 1], &[1, 1]]);
        assert_eq!(p.nnz(), 2);
        assert!(p.get(&[0, 0]) && p.get(&[1, 1]));
        assert!(!p.get(&[1, 0]));
    }

    #[test]
    fn bounding_box_of_diagonal_is_full() {
        let p = SparsityPattern::diagonal(4);
        assert_eq!(p.bounding_box(), vec![(0, 4), (0, 4)]);
    }

    #[test]
    fn bounding_box_of_first_columns() {
        // 20x20 matrix nonzero only in the first 10 columns.
        let mut p = SparsityPattern::zeros(&[20, 20]);
        for r in 0..20 {
            for c in 0..10 {
                p.set(&[r, c], true);
            }
        }
        assert_eq!(p.bounding_box(), vec![(0, 20), (0, 10)]);
    }

    #[test]
    fn bounding_box_of_all_zero_is_empty_convention() {
        let p = SparsityPattern::zeros(&[3, 4]);
        assert_eq!(p.bounding_box(), vec![(0, 0), (0, 0)]);
    }

    #[test]
    fn permuted_transposes() {
        let mut p = SparsityPattern::zeros(&[2, 3]);
        p.set(&[1, 2], true);
        let t = p.transposed();
        assert_eq!(t.extents(), &[3, 2]);
        assert!(t.get(&[2, 1]));
        assert_eq!(t.nnz(), 1);
    }

    #[test]
    fn or_projection_collapses_a_dimension() {
        let p = SparsityPattern::diagonal(3);
        let q = p.or_project_dim(1);
        assert_eq!(q.extents(), &[3]);
        assert_eq!(q.nnz(), 3);
    }
}
