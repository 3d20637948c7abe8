//! Bundled kernel corpora at desk scale: an ADER-DG scheme on
//! tetrahedra (modal basis, matrix-chain kernels with sparse operators),
//! an ADER-DG scheme on boxes (nodal tensor-product basis), and a
//! multiresolution transform kernel. Operator structure is faithful;
//! entries are seeded random values, since only structure matters to
//! the compiler.

mod lina;
mod mra;
mod seissol;

pub use lina::aderbox;
pub use mra::mra;
pub use seissol::adertet;

use anyhow::{anyhow, Result};
use einkern_core::ast::{deduce_indices, propagate_patterns, Expr, Family};
use einkern_core::codegen::{fnv1a, splitmix64, unit_f64};
use einkern_core::index::IndexString;
use einkern_core::pattern::SparsityPattern;
use einkern_core::tensor::Tensor;

/// Binomial coefficient, exact at corpus sizes.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut acc = 1usize;
    for i in 0..k.min(n - k) {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Seeded random values on a pattern, dense column-major over the
/// shape, in [0.25, 1.25) so products never vanish or cancel.
pub fn random_values(spp: &SparsityPattern, family: &str, tensor: &str) -> Vec<f64> {
    let mut state = fnv1a(family.as_bytes()) ^ fnv1a(tensor.as_bytes()).rotate_left(23);
    let mut out = vec![0.0; spp.len()];
    for (off, slot) in out.iter_mut().enumerate() {
        if spp.get_linear(off) {
            *slot = 0.25 + unit_f64(splitmix64(&mut state));
        }
    }
    out
}

/// Declares a compile-time constant tensor with seeded values on the
/// given pattern.
pub fn constant(family: &mut Family, name: &str, spp: SparsityPattern) -> Result<()> {
    let shape = spp.extents().to_vec();
    let values = random_values(&spp, &family.name.clone(), name);
    let t = Tensor::with_pattern(name, &shape, spp)
        .map_err(|e| anyhow!("{e}"))?
        .with_values(values)
        .map_err(|e| anyhow!("{e}"))?;
    family.declare(t);
    Ok(())
}

/// Declares a runtime-bound tensor with the given pattern.
pub fn slot(family: &mut Family, name: &str, spp: SparsityPattern) -> Result<()> {
    let shape = spp.extents().to_vec();
    let t = Tensor::with_pattern(name, &shape, spp).map_err(|e| anyhow!("{e}"))?;
    family.declare(t);
    Ok(())
}

/// The result sparsity pattern of an expression in the current family:
/// the automatic route for declaring derivative tensors with the
/// patterns the operators induce.
pub fn derived_pattern(
    family: &Family,
    target_letters: &str,
    expr: Expr,
) -> Result<SparsityPattern> {
    let target = IndexString::new(target_letters).map_err(|e| anyhow!("{e}"))?;
    let mut node = expr.into_node().map_err(|e| anyhow!("{e}"))?;
    deduce_indices(&mut node, &target, &family.tensors).map_err(|e| anyhow!("{e}"))?;
    propagate_patterns(&mut node, &family.tensors).map_err(|e| anyhow!("{e}"))?;
    let spp = node.spp.clone().ok_or_else(|| anyhow!("no pattern computed"))?;
    // The node's canonical letter order may differ from the requested
    // target order.
    let perm: Vec<usize> = target
        .letters()
        .iter()
        .map(|&l| node.indices.position(l).ok_or_else(|| anyhow!("letter missing")))
        .collect::<Result<_>>()?;
    Ok(spp.permuted(&perm))
}

/// All families exercised by the acceptance suite, at the configured
/// scale: tetrahedra orders 2..=4 x simulations {1, 8}, boxes 2D/3D
/// orders 3..=4, and the multiresolution kernel p in {4, 8}, q in
/// {1, 2, 4}.
pub fn acceptance_families() -> Result<Vec<Family>> {
    let mut out = Vec::new();
    for order in 2..=4 {
        for sims in [1, 8] {
            out.push(adertet(order, sims, true)?);
        }
    }
    for dim in [2, 3] {
        for order in 3..=4 {
            out.push(aderbox(dim, order)?);
        }
    }
    for p in [4, 8] {
        for q in [1, 2, 4] {
            out.push(mra(p, q, true)?);
        }
    }
    Ok(out)
}

/// Looks a corpus family up by name, e.g. `adertet_o4s8`,
/// `aderbox3d_o4`, or `mra_p4q2t`.
pub fn by_name(name: &str) -> Result<Family> {
    let parse = |s: &str| -> Option<Family> {
        if let Some(rest) = s.strip_prefix("adertet_o") {
            let transposed = !rest.ends_with('n');
            let rest = rest.trim_end_matches(['n', 't']);
            let (o, sims) = rest.split_once('s')?;
            return adertet(o.parse().ok()?, sims.parse().ok()?, transposed).ok();
        }
        if let Some(rest) = s.strip_prefix("aderbox") {
            let (d, o) = rest.split_once("d_o")?;
            return aderbox(d.parse().ok()?, o.parse().ok()?).ok();
        }
        if let Some(rest) = s.strip_prefix("mra_p") {
            let transposed = rest.ends_with('t');
            let rest = rest.trim_end_matches(['n', 't']);
            let (p, q) = rest.split_once('q')?;
            return mra(p.parse().ok()?, q.parse().ok()?, transposed).ok();
        }
        None
    };
    parse(name).ok_or_else(|| {
        anyhow!("unknown corpus family '{name}' (try adertet_o4s8, aderbox3d_o4, mra_p4q2t)")
    })
}
