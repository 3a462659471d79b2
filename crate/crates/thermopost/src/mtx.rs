//! Matrix Market coordinate files (real, general or symmetric).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thermopost_core::CsrMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    General,
    Symmetric,
}

/// Writes `a` in coordinate format. Exactly symmetric square matrices are
/// stored as their lower triangle with a `symmetric` header.
pub fn write_matrix_market(path: &Path, a: &CsrMatrix) -> Result<Symmetry> {
    let symmetry = if a.nrows() == a.ncols() && a.max_abs_diff(&a.transpose()) == 0.0 {
        Symmetry::Symmetric
    } else {
        Symmetry::General
    };
    let entries: Vec<(usize, usize, f64)> = a
        .triplets()
        .filter(|&(i, j, _)| symmetry == Symmetry::General || j <= i)
        .collect();
    let mut out = String::with_capacity(32 * entries.len() + 128);
    let kind = match symmetry {
        Symmetry::General => "general",
        Symmetry::Symmetric => "symmetric",
    };
    writeln!(out, "%%MatrixMarket matrix coordinate real {kind}").unwrap();
    writeln!(out, "{} {} {}", a.nrows(), a.ncols(), entries.len()).unwrap();
    for (i, j, v) in entries {
        writeln!(out, "{} {} {v:e}", i + 1, j + 1).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(symmetry)
}

pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_market(&text).map_err(|message| Error::format(path, message))
}

pub fn parse_matrix_market(text: &str) -> std::result::Result<CsrMatrix, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(format!("not a Matrix Market header: {header:?}"));
    }
    if fields[2] != "coordinate" {
        return Err(format!("unsupported storage {:?}", fields[2]));
    }
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(format!("unsupported field type {:?}", fields[3]));
    }
    let symmetric = match fields[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(format!("unsupported symmetry {other:?}")),
    };
    let mut data = lines.filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let size = data.next().ok_or("missing size line")?;
    let size: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad size entry {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let [nrows, ncols, nnz] = size[..] else {
        return Err("size line needs three entries".into());
    };
    if symmetric && nrows != ncols {
        return Err("symmetric matrix must be square".into());
    }
    let mut entries = Vec::with_capacity(if symmetric { 2 * nnz } else { nnz });
    for (k, line) in data.enumerate() {
        if k >= nnz {
            return Err(format!("more than the declared {nnz} entries"));
        }
        let mut it = line.split_whitespace();
        let mut index = |name: &str, bound: usize| -> std::result::Result<usize, String> {
            let t = it.next().ok_or_else(|| format!("entry {}: missing {name}", k + 1))?;
            let v: usize = t.parse().map_err(|_| format!("entry {}: bad {name} {t:?}", k + 1))?;
            if v == 0 || v > bound {
                return Err(format!("entry {}: {name} {v} outside 1..={bound}", k + 1));
            }
            Ok(v - 1)
        };
        let i = index("row", nrows)?;
        let j = index("column", ncols)?;
        let t = it.next().ok_or_else(|| format!("entry {}: missing value", k + 1))?;
        let v: f64 = t.parse().map_err(|_| format!("entry {}: bad value {t:?}", k + 1))?;
        entries.push((i, j, v));
        if symmetric && i != j {
            entries.push((j, i, v));
        }
    }
    let found = if symmetric {
        entries.iter().filter(|(i, j, _)| j <= i).count()
    } else {
        entries.len()
    };
    if found != nnz {
        return Err(format!("declared {nnz} entries, found {found}"));
    }
    CsrMatrix::from_triplets(nrows, ncols, &entries).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_general_and_symmetric() {
        let dir = tempfile::tempdir().unwrap();
        let g = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.5), (1, 2, -1.0 / 3.0), (0, 2, 0.0)]).unwrap();
        let s = CsrMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (0, 1, 0.1), (1, 0, 0.1), (2, 2, 1e-300)]).unwrap();
        for (name, m, sym) in [("g.mtx", &g, Symmetry::General), ("s.mtx", &s, Symmetry::Symmetric)] {
            let p = dir.path().join(name);
            assert_eq!(write_matrix_market(&p, m).unwrap(), sym);
            assert_eq!(&read_matrix_market(&p).unwrap(), m);
        }
    }

    #[test]
    fn rejects_malformed_files() {
        for text in [
            "",
            "%%MatrixMarket matrix array real general\n1 1\n1\n",
            "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
            "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n",
            "%%MatrixMarket matrix coordinate real symmetric\n2 3 0\n",
            "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n",
        ] {
            assert!(parse_matrix_market(text).is_err(), "{text:?}");
        }
        let m = parse_matrix_market("%%MatrixMarket matrix coordinate integer general\n% note\n1 2 1\n1 2 7\n").unwrap();
        assert_eq!(m.get(0, 1), 7.0);
    }
}
