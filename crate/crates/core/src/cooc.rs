//! Sparse co-location count matrices: object–object, word–object and
//! word–word.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{DocumentRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::util::{read_with_crc, write_with_crc};

const SHARD: usize = 256;

/// Which pair of token inventories a matrix relates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    /// objects × objects
    Oo,
    /// words × objects
    Wo,
    /// words × words
    Ww,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Oo => "oo",
            MatrixKind::Wo => "wo",
            MatrixKind::Ww => "ww",
        })
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oo" => Ok(MatrixKind::Oo),
            "wo" => Ok(MatrixKind::Wo),
            "ww" => Ok(MatrixKind::Ww),
            other => Err(Error::InvalidParam(format!(
                "unknown matrix kind {other:?}"
            ))),
        }
    }
}

/// Word–word co-occurrence window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    WholeCaption,
    Size(usize),
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" | "caption" | "0" => Ok(Window::WholeCaption),
            n => match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Window::Size(n)),
                _ => Err(Error::InvalidParam(format!("bad window {s:?}"))),
            },
        }
    }
}

/// Sparse count matrix in row-major coordinate order.
///
/// Symmetric matrices store both `(i, j)` and `(j, i)`, never the diagonal;
/// `total` is the sum over every stored cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoocMatrix {
    kind: MatrixKind,
    rows: usize,
    cols: usize,
    symmetric: bool,
    entries: Vec<(u32, u32, u64)>,
    total: u64,
}

type Cells = HashMap<(u32, u32), u64>;

impl CoocMatrix {
    /// Build from arbitrary cells; zero counts are dropped and duplicates
    /// summed.
    pub fn from_cells(
        kind: MatrixKind,
        rows: usize,
        cols: usize,
        symmetric: bool,
        cells: impl IntoIterator<Item = (u32, u32, u64)>,
    ) -> Result<Self> {
        let mut map = Cells::new();
        for (r, c, n) in cells {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::Shape(format!(
                    "cell ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
            if n > 0 {
                *map.entry((r, c)).or_default() += n;
            }
        }
        let m = Self::from_map(kind, rows, cols, symmetric, map);
        m.check_symmetry()?;
        Ok(m)
    }

    fn from_map(kind: MatrixKind, rows: usize, cols: usize, symmetric: bool, map: Cells) -> Self {
        let mut entries: Vec<(u32, u32, u64)> =
            map.into_iter().map(|((r, c), n)| (r, c, n)).collect();
        entries.sort_unstable();
        let total = entries.iter().map(|e| e.2).sum();
        CoocMatrix {
            kind,
            rows,
            cols,
            symmetric,
            entries,
            total,
        }
    }

    fn check_symmetry(&self) -> Result<()> {
        if !self.symmetric {
            return Ok(());
        }
        if self.rows != self.cols {
            return Err(Error::Shape("symmetric matrix must be square".into()));
        }
        for &(r, c, n) in &self.entries {
            if r == c {
                return Err(Error::Shape(format!(
                    "diagonal cell ({r}, {r}) in symmetric matrix"
                )));
            }
            if self.get(c as usize, r as usize) != n {
                return Err(Error::Shape(format!(
                    "cell ({r}, {c}) has no symmetric mirror"
                )));
            }
        }
        Ok(())
    }

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

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Stored cells, sorted by (row, col).
    pub fn entries(&self) -> &[(u32, u32, u64)] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.entries
            .binary_search_by(|&(r, c, _)| (r as usize, c as usize).cmp(&(row, col)))
            .map(|i| self.entries[i].2)
            .unwrap_or(0)
    }

    /// Cellwise sum of two matrices over the same vocabularies.
    pub fn add(&self, other: &CoocMatrix) -> Result<CoocMatrix> {
        if (self.kind, self.rows, self.cols, self.symmetric)
            != (other.kind, other.rows, other.cols, other.symmetric)
        {
            return Err(Error::Shape(
                "cannot add matrices of different shape or kind".into(),
            ));
        }
        let mut map = Cells::new();
        for &(r, c, n) in self.entries.iter().chain(&other.entries) {
            *map.entry((r, c)).or_default() += n;
        }
        Ok(Self::from_map(
            self.kind,
            self.rows,
            self.cols,
            self.symmetric,
            map,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = format!(
            "COOC v1 {} {} {} {} kind={}\n",
            self.rows,
            self.cols,
            self.entries.len(),
            u8::from(self.symmetric),
            self.kind
        );
        for (r, c, n) in &self.entries {
            body.push_str(&format!("{r} {c} {n}\n"));
        }
        write_with_crc(path.as_ref(), body)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = read_with_crc(path)?;
        let parsed = parse_triple_file(path, &body, "COOC")?;
        let kind = match parsed.params.get("kind") {
            Some(k) => k.parse()?,
            None => {
                return Err(Error::parse(path, 1, "header lacks kind=<oo|wo|ww>"));
            }
        };
        let mut entries = Vec::with_capacity(parsed.triples.len());
        for (line, r, c, v) in parsed.triples {
            let n: u64 = v
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad count {v:?}")))?;
            if n == 0 {
                return Err(Error::parse(path, line, "zero count stored"));
            }
            entries.push((r, c, n));
        }
        let total = entries.iter().map(|e| e.2).sum();
        let m = CoocMatrix {
            kind,
            rows: parsed.rows,
            cols: parsed.cols,
            symmetric: parsed.symmetric,
            entries,
            total,
        };
        m.check_symmetry()?;
        Ok(m)
    }
}

pub(crate) struct TripleFile<'a> {
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
    pub params: HashMap<&'a str, &'a str>,
    /// (line number, row, col, raw value)
    pub triples: Vec<(usize, u32, u32, &'a str)>,
}

/// Parse `<MAGIC> v1 <rows> <cols> <nnz> <sym> key=value...` followed by
/// sorted `row col value` lines.
pub(crate) fn parse_triple_file<'a>(
    path: &Path,
    body: &'a str,
    magic: &str,
) -> Result<TripleFile<'a>> {
    let mut lines = body.lines();
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 6 || fields[0] != magic || fields[1] != "v1" {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: header.to_owned(),
        });
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(path, 1, format!("bad header field {s:?}")))
    };
    let rows = num(fields[2])?;
    let cols = num(fields[3])?;
    let nnz = num(fields[4])?;
    let symmetric = match fields[5] {
        "0" => false,
        "1" => true,
        s => return Err(Error::parse(path, 1, format!("bad symmetric flag {s:?}"))),
    };
    let mut params = HashMap::new();
    for kv in &fields[6..] {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("bad header parameter {kv:?}")))?;
        params.insert(k, v);
    }
    let mut triples = Vec::with_capacity(nnz);
    let mut prev: Option<(u32, u32)> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let mut parts = line.split_whitespace();
        let (Some(r), Some(c), Some(v), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::parse(path, line_no, "expected `row col value`"));
        };
        let r: u32 = r
            .parse()
            .map_err(|_| Error::parse(path, line_no, "bad row index"))?;
        let c: u32 = c
            .parse()
            .map_err(|_| Error::parse(path, line_no, "bad column index"))?;
        if r as usize >= rows || c as usize >= cols {
            return Err(Error::parse(path, line_no, "index out of range"));
        }
        if prev.is_some_and(|p| p >= (r, c)) {
            return Err(Error::parse(
                path,
                line_no,
                "cells not strictly sorted by (row, col)",
            ));
        }
        prev = Some((r, c));
        triples.push((line_no, r, c, v));
    }
    if triples.len() != nnz {
        return Err(Error::CountMismatch {
            path: path.to_path_buf(),
            expected: nnz,
            found: triples.len(),
        });
    }
    Ok(TripleFile {
        rows,
        cols,
        symmetric,
        params,
        triples,
    })
}

fn build_sharded<F>(docs: &[DocumentRecord], per_doc: F) -> Cells
where
    F: Fn(&DocumentRecord, &mut Cells) + Sync,
{
    docs.par_chunks(SHARD)
        .map(|chunk| {
            let mut cells = Cells::new();
            for d in chunk {
                per_doc(d, &mut cells);
            }
            cells
        })
        .reduce(Cells::new, |a, b| {
            let (small, mut big) = if a.len() < b.len() { (a, b) } else { (b, a) };
            for (k, v) in small {
                *big.entry(k).or_default() += v;
            }
            big
        })
}

fn sorted_ids<'a>(tokens: impl Iterator<Item = &'a String>, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = tokens
        .filter_map(|t| vocab.id(t))
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    ids
}

/// Object–object matrix. Each image adds one to every unordered pair of
/// distinct object types present in it; with `multiplicity` the increment is
/// the product of the two instance counts instead.
pub fn build_oo(docs: &[DocumentRecord], objects: &Vocabulary, multiplicity: bool) -> CoocMatrix {
    let cells = build_sharded(docs, |doc, cells| {
        let mut ids = sorted_ids(doc.objects.iter(), objects);
        let mut runs: Vec<(u32, u64)> = Vec::new();
        for id in ids.drain(..) {
            match runs.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => runs.push((id, 1)),
            }
        }
        for (i, &(a, na)) in runs.iter().enumerate() {
            for &(b, nb) in &runs[i + 1..] {
                let inc = if multiplicity { na * nb } else { 1 };
                *cells.entry((a, b)).or_default() += inc;
                *cells.entry((b, a)).or_default() += inc;
            }
        }
    });
    let n = objects.len();
    CoocMatrix::from_map(MatrixKind::Oo, n, n, true, cells)
}

/// Word–object matrix: each caption adds one to every (word type in the
/// caption, object type in the image) pair.
pub fn build_wo(docs: &[DocumentRecord], words: &Vocabulary, objects: &Vocabulary) -> CoocMatrix {
    let cells = build_sharded(docs, |doc, cells| {
        let mut objs = sorted_ids(doc.objects.iter(), objects);
        objs.dedup();
        if objs.is_empty() {
            return;
        }
        for caption in &doc.captions {
            let mut ws = sorted_ids(caption.iter(), words);
            ws.dedup();
            for &w in &ws {
                for &o in &objs {
                    *cells.entry((w, o)).or_default() += 1;
                }
            }
        }
    });
    CoocMatrix::from_map(MatrixKind::Wo, words.len(), objects.len(), false, cells)
}

/// Word–word matrix: within each caption, every pair of positions at most
/// `window` apart holding distinct in-vocabulary word types adds one.
/// Positions refer to the original caption, out-of-vocabulary tokens
/// included.
pub fn build_ww(docs: &[DocumentRecord], words: &Vocabulary, window: Window) -> CoocMatrix {
    let cells = build_sharded(docs, |doc, cells| {
        for caption in &doc.captions {
            let ids: Vec<Option<u32>> = caption
                .iter()
                .map(|t| words.id(t).map(|i| i as u32))
                .collect();
            let span = match window {
                Window::WholeCaption => ids.len(),
                Window::Size(n) => n,
            };
            for (i, a) in ids.iter().enumerate() {
                let Some(a) = *a else { continue };
                for b in ids.iter().skip(i + 1).take(span).flatten() {
                    if a != *b {
                        *cells.entry((a, *b)).or_default() += 1;
                        *cells.entry((*b, a)).or_default() += 1;
                    }
                }
            }
        }
    });
    let n = words.len();
    CoocMatrix::from_map(MatrixKind::Ww, n, n, true, cells)
}
