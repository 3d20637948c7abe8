//! A multiresolution transform kernel: a rank-3 source tensor
//! contracted with a low-rank factor pair per dimension,
//! `R_ijk = S_xyz XL_xl XR_li YL_ym YR_mj ZL_zn ZR_nk`, with outer
//! indices of size `p` and ranks `q`. With `transposed` the first
//! dimension's factors are stored transposed, which yields a
//! transpose-free GEMM chain.

use anyhow::Result;
use einkern_core::ast::{access, Family};
use einkern_core::pattern::SparsityPattern;

use super::slot;

/// Builds the family `mra_p{p}q{q}[t|n]`.
pub fn mra(p: usize, q: usize, transposed: bool) -> Result<Family> {
    assert!(p >= 2 && q >= 1, "outer size >= 2, rank >= 1");
    let name = format!("mra_p{p}q{q}{}", if transposed { "t" } else { "n" });
    let mut f = Family::new(&name);
    slot(&mut f, "S", SparsityPattern::dense(&[p, p, p]))?;
    slot(&mut f, "R", SparsityPattern::dense(&[p, p, p]))?;
    if transposed {
        slot(&mut f, "XL", SparsityPattern::dense(&[q, p]))?;
        slot(&mut f, "XR", SparsityPattern::dense(&[p, q]))?;
    } else {
        slot(&mut f, "XL", SparsityPattern::dense(&[p, q]))?;
        slot(&mut f, "XR", SparsityPattern::dense(&[q, p]))?;
    }
    slot(&mut f, "YL", SparsityPattern::dense(&[p, q]))?;
    slot(&mut f, "YR", SparsityPattern::dense(&[q, p]))?;
    slot(&mut f, "ZL", SparsityPattern::dense(&[p, q]))?;
    slot(&mut f, "ZR", SparsityPattern::dense(&[q, p]))?;

    let (xl, xr) = if transposed { ("lx", "il") } else { ("xl", "li") };
    f.kernel("transform")
        .assign(
            access("R", "ijk"),
            access("S", "xyz")
                * access("XL", xl)
                * access("XR", xr)
                * access("YL", "ym")
                * access("YR", "mj")
                * access("ZL", "zn")
                * access("ZR", "nk"),
        )
        .build();
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_validate() {
        for p in [4, 8] {
            for q in [1, 2, 4] {
                for t in [true, false] {
                    let f = mra(p, q, t).unwrap();
                    assert!(einkern_core::ast::validate_family(&f).is_empty());
                }
            }
        }
    }
}
