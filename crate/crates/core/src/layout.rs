//! Memory layouts: dense column-major, bounding-box, SIMD-aligned
//! bounding-box, and CSC for matrices.
//!
//! A box layout stores the entries inside `[b_1,B_1) x .. x [b_d,B_d)`
//! with strides `t_k = prod_{l<k}(B_l - b_l)`, so the address of an
//! entry is `sum_k (i_k - b_k) t_k`. Only the first dimension may be
//! widened past the tensor shape, and only by alignment padding.

use alloc::vec::Vec;
use core::fmt;

use crate::pattern::SparsityPattern;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutError {
    /// CSC applies to rank-2 tensors only.
    CscRankError { rank: usize },
    /// A multi-index lies outside the stored box.
    OutOfBox,
}

impl fmt::Display for LayoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutError::CscRankError { rank } => {
                write!(f, "CSC layout requires rank 2, got rank {rank}")
            }
            LayoutError::OutOfBox => write!(f, "index outside the stored box"),
        }
    }
}

impl core::error::Error for LayoutError {}

/// Storage policy requested for a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutPolicy {
    Dense,
    BoundingBox,
    /// Bounding box with the first interval widened to a multiple of
    /// the vector width (in elements).
    Aligned(usize),
    Csc,
}

/// Column-major storage over a box of half-open intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxLayout {
    shape: Vec<usize>,
    intervals: Vec<(usize, usize)>,
    strides: Vec<usize>,
    alignment: usize,
}

impl BoxLayout {
    fn new(shape: &[usize], intervals: Vec<(usize, usize)>, alignment: usize) -> Self {
        let mut strides = Vec::with_capacity(intervals.len());
        let mut t = 1usize;
        for &(b, up) in &intervals {
            strides.push(t);
            t *= up - b;
        }
        BoxLayout { shape: shape.to_vec(), intervals, strides, alignment }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn alignment(&self) -> usize {
        self.alignment
    }

    pub fn element_count(&self) -> usize {
        self.intervals.iter().map(|&(b, up)| up - b).product()
    }

    pub fn contains(&self, index: &[usize]) -> bool {
        index.len() == self.intervals.len()
            && index.iter().zip(&self.intervals).all(|(&i, &(b, up))| i >= b && i < up)
    }

    pub fn address(&self, index: &[usize]) -> Result<usize, LayoutError> {
        if !self.contains(index) {
            return Err(LayoutError::OutOfBox);
        }
        Ok(index
            .iter()
            .zip(&self.intervals)
            .zip(&self.strides)
            .map(|((&i, &(b, _)), &t)| (i - b) * t)
            .sum())
    }
}

/// Compressed sparse column storage for rank-2 tensors. Values are
/// stored column by column with row indices ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CscLayout {
    shape: [usize; 2],
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
}

impl CscLayout {
    fn from_pattern(spp: &SparsityPattern) -> Result<Self, LayoutError> {
        if spp.rank() != 2 {
            return Err(LayoutError::CscRankError { rank: spp.rank() });
        }
        let (rows, cols) = (spp.extents()[0], spp.extents()[1]);
        let mut colptr = Vec::with_capacity(cols + 1);
        let mut rowidx = Vec::new();
        colptr.push(0);
        for c in 0..cols {
            for r in 0..rows {
                if spp.get(&[r, c]) {
                    rowidx.push(r);
                }
            }
            colptr.push(rowidx.len());
        }
        Ok(CscLayout { shape: [rows, cols], colptr, rowidx })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    /// Offset of a stored entry in the value array, if present.
    pub fn entry(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.shape[0] || col >= self.shape[1] {
            return None;
        }
        let range = self.colptr[col]..self.colptr[col + 1];
        self.rowidx[range.clone()].iter().position(|&r| r == row).map(|p| range.start + p)
    }
}

/// A tensor's memory layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemoryLayout {
    DenseColMajor(BoxLayout),
    BoundingBox(BoxLayout),
    Csc(CscLayout),
}

impl MemoryLayout {
    pub fn variant_name(&self) -> &'static str {
        match self {
            MemoryLayout::DenseColMajor(_) => "dense",
            MemoryLayout::BoundingBox(_) => "bbox",
            MemoryLayout::Csc(_) => "csc",
        }
    }

    pub fn as_box(&self) -> Option<&BoxLayout> {
        match self {
            MemoryLayout::DenseColMajor(b) | MemoryLayout::BoundingBox(b) => Some(b),
            MemoryLayout::Csc(_) => None,
        }
    }

    pub fn as_csc(&self) -> Option<&CscLayout> {
        match self {
            MemoryLayout::Csc(c) => Some(c),
            _ => None,
        }
    }

    /// Number of stored elements (box volume, or nnz for CSC).
    pub fn element_count(&self) -> usize {
        match self {
            MemoryLayout::DenseColMajor(b) | MemoryLayout::BoundingBox(b) => b.element_count(),
            MemoryLayout::Csc(c) => c.nnz(),
        }
    }

    /// Linear offset of an in-box entry.
    pub fn address(&self, index: &[usize]) -> Result<usize, LayoutError> {
        match self {
            MemoryLayout::DenseColMajor(b) | MemoryLayout::BoundingBox(b) => b.address(index),
            MemoryLayout::Csc(c) => {
                if index.len() != 2 {
                    return Err(LayoutError::CscRankError { rank: index.len() });
                }
                c.entry(index[0], index[1]).ok_or(LayoutError::OutOfBox)
            }
        }
    }
}

/// Widens `[b, up)` so both ends are multiples of the vector width `v`:
/// `[b - b mod v, up + (v - up mod v) mod v)`.
pub fn align_interval(interval: (usize, usize), v: usize) -> (usize, usize) {
    let (b, up) = interval;
    (b - b % v, up + (v - up % v) % v)
}

/// Assigns a memory layout. Bounding boxes derive from the pattern
/// passed in (callers hand over the equivalent sparsity pattern when
/// one is known); alignment widens the first interval only.
pub fn assign_layout(
    shape: &[usize],
    spp: &SparsityPattern,
    policy: LayoutPolicy,
) -> Result<MemoryLayout, LayoutError> {
    match policy {
        LayoutPolicy::Dense => {
            let intervals = shape.iter().map(|&n| (0, n)).collect();
            Ok(MemoryLayout::DenseColMajor(BoxLayout::new(shape, intervals, 1)))
        }
        LayoutPolicy::BoundingBox => {
            Ok(MemoryLayout::BoundingBox(BoxLayout::new(shape, spp.bounding_box(), 1)))
        }
        LayoutPolicy::Aligned(v) => {
            let v = v.max(1);
            let mut intervals = spp.bounding_box();
            if let Some(first) = intervals.first_mut() {
                if first.0 < first.1 {
                    *first = align_interval(*first, v);
                }
            }
            Ok(MemoryLayout::BoundingBox(BoxLayout::new(shape, intervals, v)))
        }
        LayoutPolicy::Csc => Ok(MemoryLayout::Csc(CscLayout::from_pattern(spp)?)),
    }
}

/// Index-fusing legality: dimensions `a..=b` of a box layout may be
/// flattened into one GEMM dimension iff `t_{i+1} = n_i t_i` holds for
/// every adjacent pair, where `n_i` is the tensor's shape extent. There
/// is no copy fallback for the failing case.
pub fn can_fuse(layout: &MemoryLayout, a: usize, b: usize) -> bool {
    let Some(bx) = layout.as_box() else {
        return false;
    };
    if b >= bx.strides().len() || a > b {
        return false;
    }
    (a..b).all(|i| bx.strides()[i + 1] == bx.shape()[i] * bx.strides()[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn alignment_widens_first_interval() {
        // b1=1, B1=7, v=4 -> [0, 8).
        assert_eq!(align_interval((1, 7), 4), (0, 8));
        assert_eq!(align_interval((0, 8), 4), (0, 8));
        assert_eq!(align_interval((3, 5), 1), (3, 5));
    }

    #[test]
    fn dense_strides_are_shape_products() {
        let spp = SparsityPattern::dense(&[4, 5, 6]);
        let l = assign_layout(&[4, 5, 6], &spp, LayoutPolicy::Dense).unwrap();
        assert_eq!(l.as_box().unwrap().strides(), &[1, 4, 20]);
        assert_eq!(l.element_count(), 120);
    }

    #[test]
    fn bbox_of_first_columns_stores_200_entries() {
        let mut spp = SparsityPattern::zeros(&[20, 20]);
        for r in 0..20 {
            for c in 0..10 {
                spp.set(&[r, c], true);
            }
        }
        let l = assign_layout(&[20, 20], &spp, LayoutPolicy::BoundingBox).unwrap();
        assert_eq!(l.as_box().unwrap().intervals(), &[(0, 20), (0, 10)]);
        assert_eq!(l.element_count(), 200);
    }

    #[test]
    fn address_examples() {
        // Dense (3,3): (2,1) -> 5.
        let dense = assign_layout(&[3, 3], &SparsityPattern::dense(&[3, 3]), LayoutPolicy::Dense)
            .unwrap();
        assert_eq!(dense.address(&[2, 1]), Ok(5));

        // Bbox [1,4)x[0,2) on (5,2): (1,0) -> 0.
        let mut spp = SparsityPattern::zeros(&[5, 2]);
        for r in 1..4 {
            for c in 0..2 {
                spp.set(&[r, c], true);
            }
        }
        let bbox = assign_layout(&[5, 2], &spp, LayoutPolicy::BoundingBox).unwrap();
        assert_eq!(bbox.as_box().unwrap().intervals(), &[(1, 4), (0, 2)]);
        assert_eq!(bbox.address(&[1, 0]), Ok(0));
        assert_eq!(bbox.address(&[0, 0]), Err(LayoutError::OutOfBox));

        // Aligned [0,8)x[0,3) from n1=7, v=8: (6,2) -> 22.
        let spp = SparsityPattern::dense(&[7, 3]);
        let aligned = assign_layout(&[7, 3], &spp, LayoutPolicy::Aligned(8)).unwrap();
        assert_eq!(aligned.as_box().unwrap().intervals(), &[(0, 8), (0, 3)]);
        assert_eq!(aligned.address(&[6, 2]), Ok(22));
    }

    #[test]
    fn fuse_dense_dims() {
        let l = assign_layout(&[4, 5, 6], &SparsityPattern::dense(&[4, 5, 6]), LayoutPolicy::Dense)
            .unwrap();
        assert!(can_fuse(&l, 0, 2));
    }

    #[test]
    fn fuse_broken_by_padding() {
        // Shape (4,5) padded to first interval [0,8): t=(1,8), n1*t1=4 != 8.
        let spp = SparsityPattern::dense(&[4, 5]);
        let l = assign_layout(&[4, 5], &spp, LayoutPolicy::Aligned(8)).unwrap();
        assert_eq!(l.as_box().unwrap().strides(), &[1, 8]);
        assert!(!can_fuse(&l, 0, 1));
    }

    #[test]
    fn fuse_survives_offset_in_last_dim() {
        // Bbox [0,4)x[1,5) on (4,5): t2 = 4 = n1*t1; the condition is
        // stride-only, so the offset does not break fusing.
        let mut spp = SparsityPattern::zeros(&[4, 5]);
        for r in 0..4 {
            for c in 1..5 {
                spp.set(&[r, c], true);
            }
        }
        let l = assign_layout(&[4, 5], &spp, LayoutPolicy::BoundingBox).unwrap();
        assert!(can_fuse(&l, 0, 1));
    }

    #[test]
    fn csc_requires_rank_two_and_stores_by_column() {
        let spp = SparsityPattern::diagonal(3);
        let l = assign_layout(&[3, 3], &spp, LayoutPolicy::Csc).unwrap();
        let csc = l.as_csc().unwrap();
        assert_eq!(csc.colptr(), &[0, 1, 2, 3]);
        assert_eq!(csc.rowidx(), &[0, 1, 2]);
        assert_eq!(l.address(&[1, 1]), Ok(1));
        assert_eq!(l.address(&[0, 1]), Err(LayoutError::OutOfBox));

        let cube = SparsityPattern::dense(&[2, 2, 2]);
        assert_eq!(
            assign_layout(&[2, 2, 2], &cube, LayoutPolicy::Csc),
            Err(LayoutError::CscRankError { rank: 3 })
        );
    }

    #[test]
    fn box_addresses_cover_offsets_exactly_once() {
        let mut spp = SparsityPattern::zeros(&[5, 4]);
        for r in 1..4 {
            for c in 1..3 {
                spp.set(&[r, c], true);
            }
        }
        let l = assign_layout(&[5, 4], &spp, LayoutPolicy::BoundingBox).unwrap();
        let mut seen = vec![false; l.element_count()];
        for r in 1..4 {
            for c in 1..3 {
                let off = l.address(&[r, c]).unwrap();
                assert!(!seen[off]);
                seen[off] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
