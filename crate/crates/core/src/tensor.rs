//! Tensor and scalar descriptors, and the naive Einstein-sum evaluator
//! that serves as the correctness oracle for every later stage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::index::{build_index_space, colmajor_offset, IndexError, IndexString};
use crate::layout::MemoryLayout;
use crate::pattern::SparsityPattern;

/// Maximum tensor rank. The alphabet allows 52 distinct letters, but
/// permutation search over temporaries makes high ranks pointless.
pub const MAX_RANK: usize = 7;

/// Errors raised when constructing tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    InvalidName { name: String },
    InvalidRank { name: String, rank: usize },
    ZeroExtent { name: String },
    PatternShapeMismatch { name: String },
    ValuesShapeMismatch { name: String },
    ValuesOutsidePattern { name: String, offset: usize },
    NonFiniteValue { name: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidName { name } => write!(f, "invalid tensor name '{name}'"),
            TensorError::InvalidRank { name, rank } => {
                write!(f, "tensor '{name}' has unsupported rank {rank} (1..={MAX_RANK})")
            }
            TensorError::ZeroExtent { name } => {
                write!(f, "tensor '{name}' has a zero extent")
            }
            TensorError::PatternShapeMismatch { name } => {
                write!(f, "sparsity pattern of '{name}' does not match its shape")
            }
            TensorError::ValuesShapeMismatch { name } => {
                write!(f, "values of '{name}' do not match its shape")
            }
            TensorError::ValuesOutsidePattern { name, offset } => {
                write!(f, "value of '{name}' at offset {offset} is nonzero outside the pattern")
            }
            TensorError::NonFiniteValue { name } => {
                write!(f, "values of '{name}' must be finite")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// True for `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A named multi-dimensional array descriptor: shape, sparsity pattern,
/// optional memory layout, and optional compile-time values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    spp: SparsityPattern,
    layout: Option<MemoryLayout>,
    values: Option<Vec<f64>>,
}

impl Tensor {
    /// A tensor with an all-ones pattern.
    pub fn new(name: &str, shape: &[usize]) -> Result<Self, TensorError> {
        Self::with_pattern(name, shape, SparsityPattern::dense(shape))
    }

    pub fn with_pattern(
        name: &str,
        shape: &[usize],
        spp: SparsityPattern,
    ) -> Result<Self, TensorError> {
        if !is_valid_name(name) {
            return Err(TensorError::InvalidName { name: name.into() });
        }
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::InvalidRank { name: name.into(), rank: shape.len() });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { name: name.into() });
        }
        if spp.extents() != shape {
            return Err(TensorError::PatternShapeMismatch { name: name.into() });
        }
        Ok(Tensor { name: name.into(), shape: shape.to_vec(), spp, layout: None, values: None })
    }

    /// Attaches compile-time values, stored dense column-major. Values
    /// must be finite and zero wherever the pattern is zero.
    pub fn with_values(mut self, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != self.element_count() {
            return Err(TensorError::ValuesShapeMismatch { name: self.name.clone() });
        }
        for (off, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFiniteValue { name: self.name.clone() });
            }
            if v != 0.0 && !self.spp.get_linear(off) {
                return Err(TensorError::ValuesOutsidePattern {
                    name: self.name.clone(),
                    offset: off,
                });
            }
        }
        self.values = Some(values);
        Ok(self)
    }

    /// Returns a copy with the given memory layout attached.
    pub fn with_layout(mut self, layout: MemoryLayout) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spp(&self) -> &SparsityPattern {
        &self.spp
    }

    pub fn layout(&self) -> Option<&MemoryLayout> {
        self.layout.as_ref()
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }
}

/// A scalar: either a finite literal or a named symbol bound at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Literal(f64),
    Symbol(String),
}

impl Scalar {
    pub fn literal(value: f64) -> Result<Self, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue { name: "<literal>".into() });
        }
        Ok(Scalar::Literal(value))
    }
}

/// Arithmetic used by the generic Einstein-sum traversal: reals under
/// `(+, *)` and booleans under `(OR, AND)`.
pub trait Semiring: Copy {
    const ZERO: Self;
    const ONE: Self;
    fn add(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
}

impl Semiring for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn mul(self, other: Self) -> Self {
        self * other
    }
}

impl Semiring for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn mul(self, other: Self) -> Self {
        self * other
    }
}

impl Semiring for bool {
    const ZERO: Self = false;
    const ONE: Self = true;
    fn add(self, other: Self) -> Self {
        self | other
    }
    fn mul(self, other: Self) -> Self {
        self & other
    }
}

/// Evaluates `U_i = sum_{j in R_U(i)} T^1[pi_1(j)] * ... * T^n[pi_n(j)]`
/// by direct iteration over the global index space. Operand grids are
/// dense column-major; the result grid is dense column-major over the
/// result letters' extents.
pub fn naive_einsum<S: Semiring>(
    result: &IndexString,
    operands: &[(&IndexString, &[usize], &[S])],
) -> Result<Vec<S>, IndexError> {
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(idx, shape, _)| (*shape, *idx)).collect();
    let space = build_index_space(&pairs)?;
    for &l in result.letters() {
        if space.position(l).is_none() {
            return Err(IndexError::ResultIndexNotInOperands { letter: l as char });
        }
    }
    let projections: Vec<_> = operands.iter().map(|(idx, _, _)| space.projection(idx)).collect();
    let result_proj = space.projection(result);
    let result_extents = space.extents_of(result);
    let result_len: usize = result_extents.iter().product();
    let mut out = vec![S::ZERO; result_len.max(1)];

    let mut tpoint: Vec<usize> = Vec::new();
    space.for_each_point(|g| {
        let mut term = S::ONE;
        for (k, (_, shape, grid)) in operands.iter().enumerate() {
            projections[k].apply(g, &mut tpoint);
            term = term.mul(grid[colmajor_offset(shape, &tpoint)]);
        }
        result_proj.apply(g, &mut tpoint);
        let off = colmajor_offset(&result_extents, &tpoint);
        out[off] = out[off].add(term);
    });
    Ok(out)
}

/// Boolean Einstein sum of operand patterns under `(OR, AND)`: the
/// sparsity pattern of a product, projected onto `result_index`.
pub fn spp_of_product(
    operands: &[(&SparsityPattern, &IndexString)],
    result_index: &IndexString,
) -> Result<SparsityPattern, IndexError> {
    let grids: Vec<Vec<bool>> = operands
        .iter()
        .map(|(p, _)| (0..p.len()).map(|off| p.get_linear(off)).collect())
        .collect();
    let ops: Vec<(&IndexString, &[usize], &[bool])> = operands
        .iter()
        .zip(&grids)
        .map(|((p, idx), grid)| (*idx, p.extents(), grid.as_slice()))
        .collect();
    let bits = naive_einsum::<bool>(result_index, &ops)?;
    let pairs: Vec<(&[usize], &IndexString)> =
        operands.iter().map(|(p, idx)| (p.extents(), *idx)).collect();
    let space = build_index_space(&pairs)?;
    let extents = space.extents_of(result_index);
    let mut out = SparsityPattern::zeros(&extents);
    for (off, &b) in bits.iter().enumerate() {
        if b {
            let mut point = vec![0usize; extents.len()];
            let mut rem = off;
            for (d, &e) in extents.iter().enumerate() {
                point[d] = rem % e;
                rem /= e;
            }
            out.set(&point, true);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(s: &str) -> IndexString {
        IndexString::new(s).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let out = naive_einsum::<f64>(
            &idx("ij"),
            &[(&idx("ik"), &[2, 2], &eye), (&idx("kj"), &[2, 2], &eye)],
        )
        .unwrap();
        assert_eq!(out, eye);
    }

    #[test]
    fn mode2_product_matches_direct_loops() {
        // C_ijk = A_ilk B_jl on 2x2x2 and 2x2.
        let a: Vec<f64> = (0..8).map(|v| v as f64 + 1.0).collect();
        let b: Vec<f64> = (0..4).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let c = naive_einsum::<f64>(
            &idx("ijk"),
            &[(&idx("ilk"), &[2, 2, 2], &a), (&idx("jl"), &[2, 2], &b)],
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let mut expect = 0.0;
                    for l in 0..2 {
                        expect += a[i + 2 * (l + 2 * k)] * b[j + 2 * l];
                    }
                    assert_eq!(c[i + 2 * (j + 2 * k)], expect);
                }
            }
        }
    }

    #[test]
    fn three_operand_contraction_matches_handwritten_quadruple_loop() {
        // C_ij = A_lj B_ikl w_k, checked against an independent nested
        // loop that never touches the projection machinery.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rng = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..4).map(|_| rng()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng()).collect();
        let w: Vec<f64> = (0..2).map(|_| rng()).collect();
        let c = naive_einsum::<f64>(
            &idx("ij"),
            &[
                (&idx("lj"), &[2, 2], &a),
                (&idx("ikl"), &[2, 2, 2], &b),
                (&idx("k"), &[2], &w),
            ],
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut expect = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        expect += a[l + 2 * j] * b[i + 2 * (k + 2 * l)] * w[k];
                    }
                }
                let denom: f64 = expect.abs().max(1.0);
                worst = worst.max((c[i + 2 * j] - expect).abs() / denom);
            }
        }
        assert!(worst <= 1e-13, "relative error {worst}");
    }

    #[test]
    fn result_letter_must_occur_in_operands() {
        let a = vec![1.0; 4];
        let err = naive_einsum::<f64>(&idx("iz"), &[(&idx("ik"), &[2, 2], &a)]).unwrap_err();
        assert_eq!(err, IndexError::ResultIndexNotInOperands { letter: 'z' });
    }

    #[test]
    fn dense_pattern_product_is_dense() {
        let d = SparsityPattern::dense(&[2, 2]);
        let out = spp_of_product(&[(&d, &idx("ik")), (&d, &idx("kj"))], &idx("ij")).unwrap();
        assert!(out.is_dense());
    }

    #[test]
    fn diagonal_times_diagonal_is_diagonal() {
        let d = SparsityPattern::diagonal(2);
        let out = spp_of_product(&[(&d, &idx("ik")), (&d, &idx("kj"))], &idx("ij")).unwrap();
        assert_eq!(out, SparsityPattern::diagonal(2));
    }

    #[test]
    fn row_vector_times_dense_reaches_one_row() {
        // K = (1 0) as a 1x2 row pattern, Q dense 2x2: K_ik Q_kj.
        let k = SparsityPattern::from_nonzeros(&[1, 2], &[&[0, 0]]);
        let q = SparsityPattern::dense(&[2, 2]);
        let out = spp_of_product(&[(&k, &idx("ik")), (&q, &idx("kj"))], &idx("ij")).unwrap();
        assert_eq!(out.extents(), &[1, 2]);
        assert!(out.is_dense());
    }

    #[test]
    fn tensor_constructor_validates() {
        assert!(Tensor::new("Q", &[2, 3]).is_ok());
        assert!(matches!(Tensor::new("2Q", &[2]), Err(TensorError::InvalidName { .. })));
        assert!(matches!(Tensor::new("Q", &[]), Err(TensorError::InvalidRank { .. })));
        assert!(matches!(Tensor::new("Q", &[2, 0]), Err(TensorError::ZeroExtent { .. })));
        let t = Tensor::with_pattern("D", &[2, 2], SparsityPattern::diagonal(2)).unwrap();
        assert!(t.clone().with_values(vec![1.0, 0.0, 0.0, 2.0]).is_ok());
        assert!(matches!(
            t.with_values(vec![1.0, 3.0, 0.0, 2.0]),
            Err(TensorError::ValuesOutsidePattern { offset: 1, .. })
        ));
    }
}
