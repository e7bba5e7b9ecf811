//! Association measures over co-location counts: shifted PPMI with context
//! distribution smoothing, plus the plain PMI / PPMI / count baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cooc::{parse_triple_file, CoocMatrix, MatrixKind};
use crate::error::{Error, Result};
use crate::util::{fmt_f64, read_with_crc, write_with_crc};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Measure {
    RawCount,
    NormalizedCount,
    Pmi,
    Ppmi,
    SppmiCds,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::RawCount,
        Measure::NormalizedCount,
        Measure::Pmi,
        Measure::Ppmi,
        Measure::SppmiCds,
    ];

    /// Whether values are clipped at zero.
    pub fn is_clipped(self) -> bool {
        matches!(self, Measure::Ppmi | Measure::SppmiCds)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::RawCount => "raw_count",
            Measure::NormalizedCount => "normalized_count",
            Measure::Pmi => "pmi",
            Measure::Ppmi => "ppmi",
            Measure::SppmiCds => "sppmi_cds",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown measure {s:?}")))
    }
}

/// Shift and smoothing parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssocParams {
    pub measure: Measure,
    /// Negative-sampling shift; the association is reduced by `ln k`.
    pub k: f64,
    /// Context distribution smoothing exponent.
    pub alpha: f64,
}

impl Default for AssocParams {
    fn default() -> Self {
        AssocParams {
            measure: Measure::SppmiCds,
            k: 5.0,
            alpha: 0.75,
        }
    }
}

impl AssocParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 1.0) {
            return Err(Error::InvalidParam(format!(
                "k must be >= 1, got {}",
                self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Marginals {
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub total: u64,
}

pub fn marginals(m: &CoocMatrix) -> Marginals {
    let mut rows = vec![0u64; m.rows()];
    let mut cols = vec![0u64; m.cols()];
    for &(r, c, n) in m.entries() {
        rows[r as usize] += n;
        cols[c as usize] += n;
    }
    Marginals {
        rows,
        cols,
        total: m.total(),
    }
}

/// `#(c)^alpha / Σ_c #(c)^alpha`.
pub fn smoothed_context(col_totals: &[u64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let powered: Vec<f64> = col_totals.iter().map(|&n| (n as f64).powf(alpha)).collect();
    let sum: f64 = powered.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate("all context totals are zero".into()));
    }
    Ok(powered.into_iter().map(|p| p / sum).collect())
}

/// Real-valued sparse matrix sharing the sparsity pattern of its source
/// counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AssocMatrix {
    kind: MatrixKind,
    rows: usize,
    cols: usize,
    symmetric: bool,
    params: AssocParams,
    entries: Vec<(u32, u32, f64)>,
}

impl AssocMatrix {
    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn params(&self) -> AssocParams {
        self.params
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .binary_search_by(|&(r, c, _)| (r as usize, c as usize).cmp(&(row, col)))
            .map(|i| self.entries[i].2)
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = format!(
            "ASSOC v1 {} {} {} {} kind={} measure={} k={} alpha={}\n",
            self.rows,
            self.cols,
            self.entries.len(),
            u8::from(self.symmetric),
            self.kind,
            self.params.measure,
            self.params.k,
            self.params.alpha
        );
        for (r, c, v) in &self.entries {
            body.push_str(&format!("{r} {c} {}\n", fmt_f64(*v)));
        }
        write_with_crc(path.as_ref(), body)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = read_with_crc(path)?;
        let parsed = parse_triple_file(path, &body, "ASSOC")?;
        let param = |key: &str| {
            parsed
                .params
                .get(key)
                .copied()
                .ok_or_else(|| Error::parse(path, 1, format!("header lacks {key}=")))
        };
        let kind: MatrixKind = param("kind")?.parse()?;
        let measure: Measure = param("measure")?.parse()?;
        let float = |key: &str| -> Result<f64> {
            param(key)?
                .parse()
                .map_err(|_| Error::parse(path, 1, format!("bad {key}")))
        };
        let params = AssocParams {
            measure,
            k: float("k")?,
            alpha: float("alpha")?,
        };
        params.validate()?;
        let mut entries = Vec::with_capacity(parsed.triples.len());
        for (line, r, c, v) in parsed.triples {
            let v: f64 = v
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad value {v:?}")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    line,
                });
            }
            if measure.is_clipped() && v < 0.0 {
                return Err(Error::parse(
                    path,
                    line,
                    "negative value for clipped measure",
                ));
            }
            entries.push((r, c, v));
        }
        Ok(AssocMatrix {
            kind,
            rows: parsed.rows,
            cols: parsed.cols,
            symmetric: parsed.symmetric,
            params,
            entries,
        })
    }
}

/// Transform every stored count cell with the chosen measure.
///
/// `pmi(w, c) = ln[ P(w, c) / (P(w) · P_alpha(c)) ]` with the smoothing applied
/// only to the context (column) side. `sppmi_cds` subtracts `ln k` before
/// clipping at zero.
pub fn associate(m: &CoocMatrix, params: AssocParams) -> Result<AssocMatrix> {
    params.validate()?;
    if m.total() == 0 {
        return Err(Error::Degenerate("co-occurrence matrix is empty".into()));
    }
    let marg = marginals(m);
    let n_total = marg.total as f64;
    let context = smoothed_context(&marg.cols, params.alpha)?;
    let shift = params.k.ln();
    let pmi = |r: u32, c: u32, n: u64| -> f64 {
        let joint = n as f64 / n_total;
        let row = marg.rows[r as usize] as f64 / n_total;
        (joint / (row * context[c as usize])).ln()
    };
    let entries = m
        .entries()
        .par_iter()
        .map(|&(r, c, n)| {
            let v = match params.measure {
                Measure::RawCount => n as f64,
                Measure::NormalizedCount => n as f64 / n_total,
                Measure::Pmi => pmi(r, c, n),
                Measure::Ppmi => pmi(r, c, n).max(0.0),
                Measure::SppmiCds => (pmi(r, c, n) - shift).max(0.0),
            };
            (r, c, v)
        })
        .collect();
    Ok(AssocMatrix {
        kind: m.kind(),
        rows: m.rows(),
        cols: m.cols(),
        symmetric: m.is_symmetric(),
        params,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(measure: Measure, k: f64, alpha: f64) -> AssocParams {
        AssocParams { measure, k, alpha }
    }

    #[test]
    fn marginals_rectangular() {
        let m =
            CoocMatrix::from_cells(MatrixKind::Wo, 1, 2, false, [(0, 0, 2), (0, 1, 1)]).unwrap();
        let g = marginals(&m);
        assert_eq!(g.rows, vec![3]);
        assert_eq!(g.cols, vec![2, 1]);
        assert_eq!(g.total, 3);
    }

    #[test]
    fn marginals_empty_and_symmetric() {
        let m = CoocMatrix::from_cells(MatrixKind::Oo, 2, 2, true, []).unwrap();
        assert_eq!(
            marginals(&m),
            Marginals {
                rows: vec![0, 0],
                cols: vec![0, 0],
                total: 0
            }
        );
        let m = CoocMatrix::from_cells(MatrixKind::Oo, 2, 2, true, [(0, 1, 4), (1, 0, 4)]).unwrap();
        let g = marginals(&m);
        assert_eq!(g.rows, vec![4, 4]);
        assert_eq!(g.total, 8);
    }

    #[test]
    fn smoothing() {
        for a in [0.1, 0.5, 1.0] {
            assert_eq!(smoothed_context(&[1, 1], a).unwrap(), vec![0.5, 0.5]);
        }
        let p = smoothed_context(&[4, 1], 1.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        let p = smoothed_context(&[4, 1], 0.5).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            smoothed_context(&[0, 0], 0.5),
            Err(Error::Degenerate(_))
        ));
        assert!(smoothed_context(&[1], 0.0).is_err());
        assert!(smoothed_context(&[1], 1.5).is_err());
    }

    #[test]
    fn single_cell_is_zero() {
        let m = CoocMatrix::from_cells(MatrixKind::Wo, 1, 1, false, [(0, 0, 1)]).unwrap();
        let a = associate(&m, params(Measure::Pmi, 1.0, 0.75)).unwrap();
        assert_eq!(a.get(0, 0), 0.0);
        let a = associate(&m, params(Measure::SppmiCds, 1.0, 0.75)).unwrap();
        assert_eq!(a.get(0, 0), 0.0);
    }

    #[test]
    fn two_by_two_diagonal_table() {
        let m =
            CoocMatrix::from_cells(MatrixKind::Wo, 2, 2, false, [(0, 0, 2), (1, 1, 2)]).unwrap();
        let a = associate(&m, params(Measure::SppmiCds, 1.0, 1.0)).unwrap();
        assert!((a.get(0, 0) - 2f64.ln()).abs() < 1e-12);
        assert!((a.get(1, 1) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(a.nnz(), 2);
        let a = associate(&m, params(Measure::SppmiCds, 2.0, 1.0)).unwrap();
        assert!(a.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn count_measures() {
        let m =
            CoocMatrix::from_cells(MatrixKind::Wo, 2, 2, false, [(0, 0, 3), (1, 0, 1)]).unwrap();
        let a = associate(&m, params(Measure::RawCount, 1.0, 1.0)).unwrap();
        assert_eq!(a.entries(), &[(0, 0, 3.0), (1, 0, 1.0)]);
        let a = associate(&m, params(Measure::NormalizedCount, 1.0, 1.0)).unwrap();
        assert_eq!(a.entries(), &[(0, 0, 0.75), (1, 0, 0.25)]);
    }

    #[test]
    fn parameter_errors() {
        let m = CoocMatrix::from_cells(MatrixKind::Wo, 1, 1, false, [(0, 0, 1)]).unwrap();
        assert!(associate(&m, params(Measure::SppmiCds, 0.5, 0.75)).is_err());
        assert!(associate(&m, params(Measure::SppmiCds, 5.0, 0.0)).is_err());
        assert!(associate(&m, params(Measure::SppmiCds, 5.0, 1.01)).is_err());
        let empty = CoocMatrix::from_cells(MatrixKind::Wo, 1, 1, false, []).unwrap();
        assert!(matches!(
            associate(&empty, AssocParams::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let m = CoocMatrix::from_cells(
            MatrixKind::Oo,
            3,
            3,
            true,
            [(0, 1, 3), (1, 0, 3), (1, 2, 1), (2, 1, 1)],
        )
        .unwrap();
        let a = associate(&m, params(Measure::Pmi, 5.0, 0.75)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.assoc");
        a.save(&p).unwrap();
        assert_eq!(AssocMatrix::load(&p).unwrap(), a);
    }

    #[test]
    fn measure_names() {
        for m in Measure::ALL {
            assert_eq!(m.to_string().parse::<Measure>().unwrap(), m);
        }
        assert!("svd".parse::<Measure>().is_err());
    }
}
