//! Index strings, the global index space, and projection maps.
//!
//! Tensors are labelled with index strings drawn from the 52-letter
//! alphabet `a..z, A..Z`. A `*`-expression over several indexed tensors
//! spans a global index space: the union of all letters, ordered
//! lexically with lowercase before uppercase. Each tensor accesses the
//! global space through a projection that picks out and permutes its own
//! letters.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// A single index letter (ASCII `a..z` or `A..Z`).
pub type Letter = u8;

/// Total order of the alphabet: `a < .. < z < A < .. < Z`.
///
/// Returns `None` for characters outside the alphabet.
pub fn letter_rank(letter: Letter) -> Option<u8> {
    match letter {
        b'a'..=b'z' => Some(letter - b'a'),
        b'A'..=b'Z' => Some(26 + letter - b'A'),
        _ => None,
    }
}

/// Errors raised while building index spaces or evaluating Einstein sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexError {
    /// A character outside `a..z, A..Z` was used as an index letter.
    InvalidLetter { letter: char },
    /// The same letter appears twice within one index string.
    DuplicateIndexInTensor { indices: String, letter: char },
    /// An index string's length does not match the rank it indexes.
    RankMismatch { indices: String, rank: usize },
    /// One letter maps to two different extents.
    SizeMismatch { letter: char, first: usize, second: usize },
    /// A result letter does not occur in any operand.
    ResultIndexNotInOperands { letter: char },
    /// A brute-force helper was asked to enumerate too large a space.
    SizeLimitExceeded { size: u128, limit: u128 },
}

impl fmt::Display for IndexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexError::InvalidLetter { letter } => {
                write!(f, "invalid index letter '{letter}': only a-z and A-Z are allowed")
            }
            IndexError::DuplicateIndexInTensor { indices, letter } => {
                write!(f, "letter '{letter}' repeats within index string '{indices}'")
            }
            IndexError::RankMismatch { indices, rank } => {
                write!(f, "index string '{indices}' does not match rank {rank}")
            }
            IndexError::SizeMismatch { letter, first, second } => {
                write!(f, "index '{letter}' has inconsistent sizes {first} and {second}")
            }
            IndexError::ResultIndexNotInOperands { letter } => {
                write!(f, "result index '{letter}' does not appear in any operand")
            }
            IndexError::SizeLimitExceeded { size, limit } => {
                write!(f, "index space of size {size} exceeds the brute-force limit {limit}")
            }
        }
    }
}

impl core::error::Error for IndexError {}

/// An ordered sequence of distinct index letters labelling the
/// dimensions of one tensor occurrence.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct IndexString {
    letters: Vec<Letter>,
}

impl IndexString {
    /// Parses an index string, rejecting non-alphabet characters and
    /// repeated letters.
    pub fn new(s: &str) -> Result<Self, IndexError> {
        let mut letters = Vec::with_capacity(s.len());
        for &b in s.as_bytes() {
            if letter_rank(b).is_none() {
                return Err(IndexError::InvalidLetter { letter: b as char });
            }
            if letters.contains(&b) {
                return Err(IndexError::DuplicateIndexInTensor {
                    indices: String::from(s),
                    letter: b as char,
                });
            }
            letters.push(b);
        }
        Ok(IndexString { letters })
    }

    /// Builds an index string from raw letters. Panics on invalid input;
    /// intended for letters that already passed validation.
    pub fn from_letters(letters: &[Letter]) -> Self {
        let mut s = String::with_capacity(letters.len());
        for &l in letters {
            s.push(l as char);
        }
        Self::new(&s).expect("letters must be distinct alphabet characters")
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn contains(&self, letter: Letter) -> bool {
        self.letters.contains(&letter)
    }

    pub fn position(&self, letter: Letter) -> Option<usize> {
        self.letters.iter().position(|&l| l == letter)
    }

    /// The same letters reordered lexically; the canonical spelling used
    /// for temporaries before a permutation has been chosen.
    pub fn sorted(&self) -> IndexString {
        let mut letters = self.letters.clone();
        letters.sort_by_key(|&l| letter_rank(l).unwrap());
        IndexString { letters }
    }

    /// True when `other` holds the same letters in any order.
    pub fn same_letters(&self, other: &IndexString) -> bool {
        self.len() == other.len() && self.letters.iter().all(|&l| other.contains(l))
    }
}

impl fmt::Display for IndexString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &l in &self.letters {
            write!(f, "{}", l as char)?;
        }
        Ok(())
    }
}

impl fmt::Debug for IndexString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// The global index space of a `*`-expression: every participating
/// letter exactly once, lexically ordered, with a consistent extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSpace {
    letters: Vec<Letter>,
    sizes: Vec<usize>,
}

impl IndexSpace {
    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn rank(&self) -> usize {
        self.letters.len()
    }

    /// 1-based position of a letter in the lexical order, i.e. the
    /// dimension it occupies in the global space.
    pub fn position(&self, letter: Letter) -> Option<usize> {
        self.letters.iter().position(|&l| l == letter).map(|p| p + 1)
    }

    pub fn size(&self, letter: Letter) -> Option<usize> {
        self.position(letter).map(|p| self.sizes[p - 1])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of points in the full space.
    pub fn point_count(&self) -> u128 {
        self.sizes.iter().map(|&s| s as u128).product()
    }

    /// Extents of a subset of letters, in the order given.
    pub fn extents_of(&self, indices: &IndexString) -> Vec<usize> {
        indices
            .letters()
            .iter()
            .map(|&l| self.size(l).expect("letter must be part of the space"))
            .collect()
    }

    /// The projection from this space onto a tensor labelled `indices`.
    pub fn projection(&self, indices: &IndexString) -> Projection {
        let dims = indices
            .letters()
            .iter()
            .map(|&l| self.position(l).expect("letter must be part of the space") - 1)
            .collect();
        Projection { dims }
    }

    /// Visits every point of the space, first letter fastest. The
    /// callback receives the current multi-index.
    pub fn for_each_point(&self, mut f: impl FnMut(&[usize])) {
        for_each_point(&self.sizes, |p| f(p));
    }
}

/// The permute-and-project map from a global multi-index onto one
/// tensor's multi-index: dimension `d` of the tensor reads global
/// dimension `dims[d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projection {
    dims: Vec<usize>,
}

impl Projection {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Zero-based global dimensions, one per tensor dimension.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn apply(&self, global: &[usize], out: &mut Vec<usize>) {
        out.clear();
        out.extend(self.dims.iter().map(|&d| global[d]));
    }
}

/// Builds the global index space of a `*`-expression from
/// `(shape, index string)` pairs, checking size consistency.
pub fn build_index_space(
    operands: &[(&[usize], &IndexString)],
) -> Result<IndexSpace, IndexError> {
    let mut letters: Vec<Letter> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (shape, indices) in operands {
        if shape.len() != indices.len() {
            return Err(IndexError::RankMismatch {
                indices: alloc::format!("{indices}"),
                rank: shape.len(),
            });
        }
        for (d, &letter) in indices.letters().iter().enumerate() {
            match letters.iter().position(|&l| l == letter) {
                Some(pos) => {
                    if sizes[pos] != shape[d] {
                        return Err(IndexError::SizeMismatch {
                            letter: letter as char,
                            first: sizes[pos],
                            second: shape[d],
                        });
                    }
                }
                None => {
                    letters.push(letter);
                    sizes.push(shape[d]);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..letters.len()).collect();
    order.sort_by_key(|&i| letter_rank(letters[i]).unwrap());
    Ok(IndexSpace {
        letters: order.iter().map(|&i| letters[i]).collect(),
        sizes: order.iter().map(|&i| sizes[i]).collect(),
    })
}

/// Visits every multi-index of a box with the given extents, first
/// dimension fastest. An empty extent list visits the single empty
/// point; any zero extent visits nothing.
pub fn for_each_point(extents: &[usize], mut f: impl FnMut(&[usize])) {
    if extents.iter().any(|&e| e == 0) {
        return;
    }
    let mut point = alloc::vec![0usize; extents.len()];
    loop {
        f(&point);
        let mut d = 0;
        loop {
            if d == extents.len() {
                return;
            }
            point[d] += 1;
            if point[d] < extents[d] {
                break;
            }
            point[d] = 0;
            d += 1;
        }
    }
}

/// Linear offset of a multi-index in column-major order (first
/// dimension fastest), the internal storage convention for dense grids.
pub fn colmajor_offset(extents: &[usize], point: &[usize]) -> usize {
    let mut offset = 0;
    let mut stride = 1;
    for (d, &e) in extents.iter().enumerate() {
        debug_assert!(point[d] < e);
        offset += point[d] * stride;
        stride *= e;
    }
    offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn letter_order_is_lowercase_first() {
        assert!(letter_rank(b'z') < letter_rank(b'A'));
        assert_eq!(letter_rank(b'a'), Some(0));
        assert_eq!(letter_rank(b'Z'), Some(51));
        assert_eq!(letter_rank(b'_'), None);
    }

    #[test]
    fn index_string_rejects_duplicates_and_invalid() {
        assert!(IndexString::new("ij").is_ok());
        assert_eq!(
            IndexString::new("ii"),
            Err(IndexError::DuplicateIndexInTensor { indices: "ii".into(), letter: 'i' })
        );
        assert_eq!(IndexString::new("i1"), Err(IndexError::InvalidLetter { letter: '1' }));
    }

    #[test]
    fn space_of_single_tensor() {
        let idx = IndexString::new("i").unwrap();
        let space = build_index_space(&[(&[3], &idx)]).unwrap();
        assert_eq!(space.letters(), b"i");
        assert_eq!(space.size(b'i'), Some(3));
    }

    #[test]
    fn jik_example_positions_and_sizes() {
        // A(2,2,2)['jik']: P_A(j)=1, P_A(i)=2, P_A(k)=3, all sizes 2.
        let idx = IndexString::new("jik").unwrap();
        let space = build_index_space(&[(&[2, 2, 2], &idx)]).unwrap();
        assert_eq!(space.letters(), b"ijk");
        assert_eq!(space.size(b'i'), Some(2));
        assert_eq!(space.size(b'j'), Some(2));
        assert_eq!(space.size(b'k'), Some(2));
        // The projection reads global dims in the tensor's own order j,i,k.
        let proj = space.projection(&idx);
        assert_eq!(proj.dims(), &[1, 0, 2]);
    }

    #[test]
    fn size_mismatch_is_detected() {
        // A(2,3)['ij'] against B(4,2)['ji']: B assigns j=4 and i=2, so
        // the inconsistent letter is j (3 vs 4).
        let a = IndexString::new("ij").unwrap();
        let b = IndexString::new("ji").unwrap();
        let err = build_index_space(&[(&[2, 3], &a), (&[4, 2], &b)]).unwrap_err();
        assert_eq!(err, IndexError::SizeMismatch { letter: 'j', first: 3, second: 4 });
        // A mismatch on the first letter i is reported as such.
        let c = IndexString::new("ij").unwrap();
        let err = build_index_space(&[(&[2, 3], &a), (&[4, 3], &c)]).unwrap_err();
        assert_eq!(err, IndexError::SizeMismatch { letter: 'i', first: 2, second: 4 });
    }

    #[test]
    fn mode2_product_projections() {
        // C_ijk = A_ilk B_jl: pi_A:(i,j,k,l)->(i,l,k), pi_B:(i,j,k,l)->(j,l).
        let a = IndexString::new("ilk").unwrap();
        let b = IndexString::new("jl").unwrap();
        let space = build_index_space(&[(&[2, 2, 2], &a), (&[2, 2], &b)]).unwrap();
        assert_eq!(space.letters(), b"ijkl");
        assert_eq!(space.projection(&a).dims(), &[0, 3, 2]);
        assert_eq!(space.projection(&b).dims(), &[1, 3]);
    }

    #[test]
    fn point_iteration_is_first_dim_fastest() {
        let mut seen = vec![];
        for_each_point(&[2, 2], |p| seen.push((p[0], p[1])));
        assert_eq!(seen, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn determinism_of_space_ordering() {
        let a = IndexString::new("zC").unwrap();
        let b = IndexString::new("Ab").unwrap();
        let s1 = build_index_space(&[(&[2, 3], &a), (&[4, 5], &b)]).unwrap();
        let s2 = build_index_space(&[(&[2, 3], &a), (&[4, 5], &b)]).unwrap();
        assert_eq!(s1, s2);
        // Lowercase letters order before uppercase.
        assert_eq!(s1.letters(), b"bzAC");
    }
}
