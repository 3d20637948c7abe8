//! ADER-DG kernels on box elements with a nodal tensor-product basis:
//! time derivatives, the time integral, the weak derivative update,
//! boundary-node extraction, and the numerical flux of one side pair.
//! Per convergence order `O` there are `O` points per dimension and
//! `d + 1` quantities in `d` dimensions. The 1D operators are dense;
//! sparsity enters through the coefficient matrices of the system,
//! which are compile-time constants stored transposed and compressed
//! sparse column.

use anyhow::Result;
use einkern_core::ast::{access, sym, Expr, Family};
use einkern_core::pattern::SparsityPattern;

use super::{constant, slot};

/// Coefficient matrix of the linear acoustic system for one direction,
/// transposed: pressure couples to one velocity component and back.
/// Direction `dir` is 0-based; quantity 0 is pressure, 1.. velocities.
fn star_t_pattern(quantities: usize, dir: usize) -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[quantities, quantities]);
    // (A*)_pq nonzero at (0, 1+dir) and (1+dir, 0); transposed storage
    // keeps the same symmetric-looking pair.
    p.set(&[0, 1 + dir], true);
    p.set(&[1 + dir, 0], true);
    p
}

/// Riemann flux matrix for one direction, transposed: couples pressure
/// and the direction's velocity within a dense 2 x 2 block.
fn riemann_t_pattern(quantities: usize, dir: usize) -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[quantities, quantities]);
    for &a in &[0usize, 1 + dir] {
        for &b in &[0usize, 1 + dir] {
            p.set(&[a, b], true);
        }
    }
    p
}

/// Endpoint-evaluation vector: a single nonzero at the first or last
/// node.
fn endpoint(o: usize, last: bool) -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[o]);
    p.set(&[if last { o - 1 } else { 0 }], true);
    p
}

/// Builds the family `aderbox{dim}d_o{order}`.
pub fn aderbox(dim: usize, order: usize) -> Result<Family> {
    assert!(dim == 2 || dim == 3, "supported dimensions are 2 and 3");
    assert!((2..=6).contains(&order), "supported orders are 2..=6");
    let o = order;
    let qn = dim + 1;
    let name = format!("aderbox{dim}d_o{order}");
    let mut f = Family::new(&name);

    // 1D operators: the differentiation operator is used natural in the
    // x direction and transposed in the others; same for the update
    // operator.
    constant(&mut f, "Gd", SparsityPattern::dense(&[o, o]))?;
    constant(&mut f, "GdT", SparsityPattern::dense(&[o, o]))?;
    constant(&mut f, "Gu", SparsityPattern::dense(&[o, o]))?;
    constant(&mut f, "GuT", SparsityPattern::dense(&[o, o]))?;

    // Coefficient and flux matrices (constants; CSC-eligible densities).
    for (i, t) in ["Ast", "Bst", "Cst"].iter().enumerate().take(dim) {
        constant(&mut f, t, star_t_pattern(qn, i))?;
    }
    let flux_dir = dim - 1;
    constant(&mut f, "Fp", riemann_t_pattern(qn, flux_dir))?;
    constant(&mut f, "Fm", riemann_t_pattern(qn, flux_dir))?;

    // Endpoint evaluation vectors of the flux side pair and the
    // update weights of that side.
    constant(&mut f, "Eva", endpoint(o, false))?;
    constant(&mut f, "Evb", endpoint(o, true))?;
    constant(&mut f, "Wa", SparsityPattern::dense(&[o]))?;
    constant(&mut f, "Wb", SparsityPattern::dense(&[o]))?;

    let dof_letters = if dim == 3 { "xyzp" } else { "xyp" };
    let dof_shape: Vec<usize> =
        if dim == 3 { vec![o, o, o, qn] } else { vec![o, o, qn] };
    slot(&mut f, "Q", SparsityPattern::dense(&dof_shape))?;
    slot(&mut f, "Qs", SparsityPattern::dense(&dof_shape))?;
    slot(&mut f, "T", SparsityPattern::dense(&dof_shape))?;
    // Boundary values of the flux side pair: own side a/b and the two
    // neighbours.
    let face_shape: Vec<usize> = if dim == 3 { vec![o, o, qn] } else { vec![o, qn] };
    let face_letters = if dim == 3 { "xyp" } else { "xp" };
    for tname in ["Ba", "Bb", "Na", "Nb"] {
        slot(&mut f, tname, SparsityPattern::dense(&face_shape))?;
    }

    let degree = order - 1;
    for d in 0..=degree {
        f.declare_scalar(&format!("c{d}"), None);
        slot(&mut f, &format!("D{d}"), SparsityPattern::dense(&dof_shape))?;
    }

    // Per-direction derivative terms: x uses the natural operator, the
    // remaining directions the transposed copy.
    let terms = |src: &str, gd: &str, gdt: &str| -> Expr {
        if dim == 3 {
            access(gd, "xl") * access(src, "lyzq") * access("Ast", "qp")
                + access(gdt, "my") * access(src, "xmzq") * access("Bst", "qp")
                + access(gdt, "nz") * access(src, "xynq") * access("Cst", "qp")
        } else {
            access(gd, "xl") * access(src, "lyq") * access("Ast", "qp")
                + access(gdt, "my") * access(src, "xmq") * access("Bst", "qp")
        }
    };

    for d in 1..=degree {
        let prev = format!("D{}", d - 1);
        f.kernel(&format!("derivative{d}"))
            .assign(access(&format!("D{d}"), dof_letters), terms(&prev, "Gd", "GdT"))
            .build();
    }

    {
        let mut e = sym("c0") * access("D0", dof_letters);
        for d in 1..=degree {
            e = e + sym(&format!("c{d}")) * access(&format!("D{d}"), dof_letters);
        }
        f.kernel("timeIntegral").assign(access("T", dof_letters), e).build();
    }

    f.kernel("weakDerivative")
        .assign(
            access("Qs", dof_letters),
            access("Q", dof_letters) + terms("T", "Gu", "GuT"),
        )
        .build();

    // Boundary-node extraction of the flux side pair (last dimension's
    // two endpoints).
    {
        let (ea, eb, src_idx) = if dim == 3 {
            ("n", "n", "xynp")
        } else {
            ("n", "n", "xnp")
        };
        f.kernel("evaluateSides")
            .assign(access("Ba", face_letters), access("Eva", ea) * access("T", src_idx))
            .assign(access("Bb", face_letters), access("Evb", eb) * access("T", src_idx))
            .build();
    }

    // Numerical flux of the side pair: an outer product of the side
    // weights with the Riemann-solved boundary contributions.
    {
        let (own_idx, w_letter) = if dim == 3 { ("xyq", "z") } else { ("xq", "y") };
        let flux_half = |w: &str, own: &str, neigh: &str| -> Expr {
            access(w, w_letter) * access(own, own_idx) * access("Fp", "qp")
                + access(w, w_letter) * access(neigh, own_idx) * access("Fm", "qp")
        };
        f.kernel("flux")
            .assign(
                access("Q", dof_letters),
                access("Qs", dof_letters)
                    + flux_half("Wa", "Ba", "Na")
                    + flux_half("Wb", "Bb", "Nb"),
            )
            .build();
    }

    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_matrices_are_csc_eligible() {
        // 2 nonzeros of 16 in 3D: density 0.125.
        let p = star_t_pattern(4, 0);
        assert_eq!(p.nnz(), 2);
        let r = riemann_t_pattern(4, 2);
        assert_eq!(r.nnz(), 4);
    }

    #[test]
    fn families_validate() {
        for dim in [2, 3] {
            for order in 3..=4 {
                let f = aderbox(dim, order).unwrap();
                let diags = einkern_core::ast::validate_family(&f);
                assert!(diags.is_empty(), "{dim}d order {order}: {diags:?}");
            }
        }
    }
}
