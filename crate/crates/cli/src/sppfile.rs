//! Sparsity-pattern text files: the first line holds space-separated
//! extents, each following non-empty line one zero-based nonzero
//! coordinate. Duplicate coordinates are idempotent.

use anyhow::{bail, Context, Result};
use einkern_core::SparsityPattern;

/// Parses the pattern format from text.
pub fn parse_spp(text: &str) -> Result<SparsityPattern> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().context("empty sparsity pattern file")?;
    let extents: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().with_context(|| format!("bad extent '{t}'")))
        .collect::<Result<_>>()?;
    if extents.is_empty() || extents.iter().any(|&e| e == 0) {
        bail!("extents must be positive");
    }
    let mut p = SparsityPattern::zeros(&extents);
    for (ln, line) in lines {
        let coord: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().with_context(|| format!("line {}: bad coordinate '{t}'", ln + 1)))
            .collect::<Result<_>>()?;
        if coord.len() != extents.len() {
            bail!("line {}: expected {} coordinates, got {}", ln + 1, extents.len(), coord.len());
        }
        for (d, (&c, &e)) in coord.iter().zip(&extents).enumerate() {
            if c >= e {
                bail!("line {}: coordinate {c} out of range for dimension {d} (extent {e})", ln + 1);
            }
        }
        p.set(&coord, true);
    }
    Ok(p)
}

/// Serializes a pattern in the same format.
pub fn print_spp(p: &SparsityPattern) -> String {
    let mut out = String::new();
    let header: Vec<String> = p.extents().iter().map(|e| e.to_string()).collect();
    out.push_str(&header.join(" "));
    out.push('\n');
    p.for_each_nonzero(|coord| {
        let line: Vec<String> = coord.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_roundtrip() {
        let p = parse_spp("2 2\n0 0\n1 1\n1 1\n").unwrap();
        assert_eq!(p, SparsityPattern::diagonal(2));
        let text = print_spp(&p);
        assert_eq!(parse_spp(&text).unwrap(), p);
    }

    #[test]
    fn out_of_range_coordinate_is_an_error() {
        let err = parse_spp("2 2\n0 2\n").unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(parse_spp("2 2\n0\n").is_err());
        assert!(parse_spp("2 2\nx y\n").is_err());
    }
}
