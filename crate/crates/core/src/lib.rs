//! Compiler core for small Einstein-notation tensor kernels.
//!
//! The pipeline implemented here takes kernels written as Einstein-sum
//! expressions over small tensors with known sparsity patterns and turns
//! them into executable straight-line programs:
//!
//! 1. [`ast`] builds and normalises expression trees.
//! 2. [`eqspp`] computes equivalent sparsity patterns, the minimal
//!    per-operand masks that leave a result unchanged assuming no
//!    cancellation.
//! 3. [`strength`] searches for an operation-minimal sequence of binary
//!    multiplication/summation formulae using a sparse cost model.
//! 4. [`layout`] assigns column-major, bounding-box, aligned, or CSC
//!    memory layouts.
//! 5. [`logmap`] identifies contractions, enumerates loop-over-GEMM
//!    implementations, and fixes index permutations of temporaries by
//!    dynamic programming.
//! 6. [`cfg`] lowers the tree to a branch-free action sequence and runs
//!    the optimisation passes.
//! 7. [`codegen`] classifies actions, counts non-zero/hardware flops,
//!    interprets programs, and emits portable C99.
//!
//! Everything in this crate is `no_std` + `alloc`: the crate is pure
//! computation over owned data and performs no IO.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod ast;
pub mod cfg;
pub mod codegen;
pub mod eqspp;
pub mod index;
pub mod layout;
pub mod logmap;
pub mod pattern;
pub mod strength;
pub mod tensor;

pub use index::{build_index_space, IndexError, IndexSpace, IndexString, Projection};
pub use pattern::SparsityPattern;
pub use tensor::{naive_einsum, spp_of_product, Scalar, Tensor};
