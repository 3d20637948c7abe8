//! ADER-DG kernels on tetrahedra with a modal (degree-graded) basis:
//! time derivatives through repeated application of transposed
//! stiffness operators, the time integral, the volume update, and one
//! representative face of the local and neighbour flux corrections.
//! Sizes per convergence order `O` (degree `N = O - 1`): the volume
//! basis has `B = C(N+3, 3)` functions, face bases `Bt = C(N+2, 2)`,
//! and there are 9 quantities. With `sims > 1` an extra leading
//! dimension batches simultaneous simulations.
//!
//! With `transposed` the constant operators are stored so that a
//! transpose-free GEMM scheme exists. Which operators flip differs
//! between single and fused simulations: fused runs store the
//! square/face operators transposed and keep the projection matrices
//! natural; single runs do the opposite. Coefficient and Riemann
//! matrices are stored transposed in both schemes.

use anyhow::Result;
use einkern_core::ast::{access, sym, Expr, Family};
use einkern_core::pattern::SparsityPattern;

use super::{binomial, constant, derived_pattern, slot};

/// Degree of basis function `k` in a degree-graded ordering: the basis
/// functions of total degree <= m occupy the first C(m+3,3) slots.
fn degree_of(k: usize) -> usize {
    let mut m = 0;
    while k >= binomial(m + 3, 3) {
        m += 1;
    }
    m
}

/// Differentiation operator pattern (`B x B`): entry (k, l) may be
/// nonzero when the target function has lower degree than the source,
/// and only the first `Bt` rows carry nonzeros. Iterating it shrinks a
/// derivative's support to `C(N - d + 3, 3)` rows.
fn dtilde_pattern(b: usize, bt: usize) -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[b, b]);
    for k in 0..b.min(bt) {
        for l in 0..b {
            if degree_of(k) < degree_of(l) {
                p.set(&[k, l], true);
            }
        }
    }
    p
}

/// Update stiffness pattern (`B x B`): only the first `Bt` columns are
/// nonzero.
fn dhat_pattern(b: usize, bt: usize) -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[b, b]);
    for k in 0..b {
        for l in 0..bt {
            p.set(&[k, l], true);
        }
    }
    p
}

/// Coefficient-matrix pattern of the wave-equation system: 6 flux
/// rows coupling to 3 gradient columns and vice versa (anti-diagonal
/// block structure, 36 of 81 entries).
fn star_pattern() -> SparsityPattern {
    let mut p = SparsityPattern::zeros(&[9, 9]);
    for r in 0..6 {
        for c in 6..9 {
            p.set(&[r, c], true);
        }
    }
    for r in 6..9 {
        for c in 0..6 {
            p.set(&[r, c], true);
        }
    }
    p
}

/// Builds the family `adertet_o{order}s{sims}[n]`.
pub fn adertet(order: usize, sims: usize, transposed: bool) -> Result<Family> {
    assert!((2..=6).contains(&order), "supported orders are 2..=6");
    let n = order - 1;
    let b = binomial(n + 3, 3);
    let bt = binomial(n + 2, 2);
    let q = 9usize;
    let name = format!("adertet_o{order}s{sims}{}", if transposed { "" } else { "n" });
    let mut f = Family::new(&name);

    let multi = sims > 1;
    // Square and face-exchange operators flip for fused runs; the
    // projection matrices flip for single runs.
    let flip_ops = transposed && multi;
    let flip_proj = transposed && !multi;

    let dof_letters = if multi { "skp" } else { "kp" };
    let dof_shape: Vec<usize> = if multi { vec![sims, b, q] } else { vec![b, q] };

    for dir in ["x", "y", "z"] {
        let dt = dtilde_pattern(b, bt);
        let dh = dhat_pattern(b, bt);
        if flip_ops {
            constant(&mut f, &format!("Dt{dir}"), dt.transposed())?;
            constant(&mut f, &format!("Dh{dir}"), dh.transposed())?;
        } else {
            constant(&mut f, &format!("Dt{dir}"), dt)?;
            constant(&mut f, &format!("Dh{dir}"), dh)?;
        }
    }
    // Coefficient matrices of the system (runtime, element dependent).
    for t in ["Ast", "Bst", "Cst"] {
        let p = star_pattern();
        slot(&mut f, t, if transposed { p.transposed() } else { p })?;
    }
    // Face operators: Rhat/Rtil/Rfc are B x Bt evaluation/projection
    // matrices, Fex the Bt x Bt face exchange; Riemann solutions are
    // dense 9 x 9.
    constant(
        &mut f,
        "Rhat",
        if flip_ops {
            SparsityPattern::dense(&[bt, b])
        } else {
            SparsityPattern::dense(&[b, bt])
        },
    )?;
    constant(
        &mut f,
        "Fex",
        SparsityPattern::dense(&[bt, bt]),
    )?;
    constant(
        &mut f,
        "Rtil",
        if flip_proj {
            SparsityPattern::dense(&[bt, b])
        } else {
            SparsityPattern::dense(&[b, bt])
        },
    )?;
    constant(
        &mut f,
        "Rfc",
        if flip_proj {
            SparsityPattern::dense(&[bt, b])
        } else {
            SparsityPattern::dense(&[b, bt])
        },
    )?;
    slot(&mut f, "Rp", SparsityPattern::dense(&[q, q]))?;
    slot(&mut f, "Rm", SparsityPattern::dense(&[q, q]))?;

    // Degrees of freedom, time integral, and the neighbour's integral.
    slot(&mut f, "Q", SparsityPattern::dense(&dof_shape))?;
    slot(&mut f, "T", SparsityPattern::dense(&dof_shape))?;
    slot(&mut f, "Tn", SparsityPattern::dense(&dof_shape))?;

    // Taylor coefficients of the time expansion.
    for d in 0..=n {
        f.declare_scalar(&format!("c{d}"), None);
    }

    // Access strings per storage orientation.
    let (ox, oy, oz) = if flip_ops { ("lk", "mk", "nk") } else { ("kl", "km", "kn") };
    let star_idx = if transposed { "qp" } else { "pq" };
    let (i1, i2, i3) = if multi { ("slq", "smq", "snq") } else { ("lq", "mq", "nq") };

    // Derivative tensors: D0 is dense; each next derivative is declared
    // with the pattern the expression induces (read back from the
    // sparsity analysis).
    slot(&mut f, "D0", SparsityPattern::dense(&dof_shape))?;
    for d in 1..=n {
        let prev = format!("D{}", d - 1);
        let term = |op: &str, di: &str, opi: &str, st: &str| -> Expr {
            access(op, opi) * access(&prev, di) * access(st, star_idx)
        };
        let e = term("Dtx", i1, ox, "Ast")
            + term("Dty", i2, oy, "Bst")
            + term("Dtz", i3, oz, "Cst");
        let spp = derived_pattern(&f, dof_letters, e)?;
        slot(&mut f, &format!("D{d}"), spp)?;
    }

    for d in 1..=n {
        let prev = format!("D{}", d - 1);
        let term = |op: &str, di: &str, opi: &str, st: &str| -> Expr {
            access(op, opi) * access(&prev, di) * access(st, star_idx)
        };
        f.kernel(&format!("derivative{d}"))
            .assign(
                access(&format!("D{d}"), dof_letters),
                term("Dtx", i1, ox, "Ast")
                    + term("Dty", i2, oy, "Bst")
                    + term("Dtz", i3, oz, "Cst"),
            )
            .build();
    }

    {
        let mut e = sym("c0") * access("D0", dof_letters);
        for d in 1..=n {
            e = e + sym(&format!("c{d}")) * access(&format!("D{d}"), dof_letters);
        }
        f.kernel("timeIntegral").assign(access("T", dof_letters), e).build();
    }

    {
        let term = |op: &str, di: &str, opi: &str, st: &str| -> Expr {
            access(op, opi) * access("T", di) * access(st, star_idx)
        };
        f.kernel("volume")
            .accumulate(
                access("Q", dof_letters),
                term("Dhx", i1, ox, "Ast")
                    + term("Dhy", i2, oy, "Bst")
                    + term("Dhz", i3, oz, "Cst"),
            )
            .build();
    }

    {
        // One representative face of the local correction:
        // Q += Rhat_km Rtil_lm T_(s)lq (A+)_pq.
        let rh = if flip_ops { "mk" } else { "km" };
        let rt = if flip_proj { "ml" } else { "lm" };
        f.kernel("localFlux")
            .accumulate(
                access("Q", dof_letters),
                access("Rhat", rh)
                    * access("Rtil", rt)
                    * access("T", i1)
                    * access("Rp", star_idx),
            )
            .build();
    }

    {
        // One representative face of the neighbour correction:
        // Q += Rhat_km Fex_mn Rfc_ln Tn_(s)lq (A-)_pq.
        let rh = if flip_ops { "mk" } else { "km" };
        let fx = if flip_ops { "nm" } else { "mn" };
        let rf = if flip_proj { "nl" } else { "ln" };
        f.kernel("neighbourFlux")
            .accumulate(
                access("Q", dof_letters),
                access("Rhat", rh)
                    * access("Fex", fx)
                    * access("Rfc", rf)
                    * access("Tn", i1)
                    * access("Rm", star_idx),
            )
            .prefetch(&["Tn"])
            .build();
    }

    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes_match_binomials() {
        // Order 4: B = 20, Bt = 10; order 6: B = 56, Bt = 21.
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(7, 2), 21);
    }

    #[test]
    fn derivative_patterns_shrink_binomially() {
        // Order 4 (degree 3): the d-th derivative keeps C(3-d+3,3)
        // nonzero rows per quantity: 10, 4, 1.
        let f = adertet(4, 1, true).unwrap();
        for (d, rows) in [(1usize, 10usize), (2, 4), (3, 1)] {
            let spp = f.tensors[&format!("D{d}")].spp();
            let bbox = spp.bounding_box();
            assert_eq!(bbox[0], (0, rows), "derivative {d}");
        }
    }

    #[test]
    fn update_operator_restricts_to_face_basis_columns() {
        let p = dhat_pattern(20, 10);
        assert_eq!(p.bounding_box(), vec![(0, 20), (0, 10)]);
        assert_eq!(p.nnz(), 200);
        // The differentiation pattern is the staircase counterpart.
        let t = dtilde_pattern(20, 10);
        assert_eq!(t.bounding_box()[0], (0, 10));
        assert!(t.nnz() < 200);
    }

    #[test]
    fn families_build_for_all_supported_scales() {
        for order in 2..=4 {
            for sims in [1, 8] {
                let f = adertet(order, sims, true).unwrap();
                assert!(einkern_core::ast::validate_family(&f).is_empty());
            }
        }
        let f = adertet(3, 8, false).unwrap();
        assert!(einkern_core::ast::validate_family(&f).is_empty());
    }
}
