//! Dense token embeddings and their text interchange format.
//!
//! ```text
//! <count> <dim>
//! #provenance v_wor
//! #seed 42
//! dog 1.2345678901234567e-1 ...
//! ```
//!
//! Values carry 17 significant digits so export followed by import is exact.
//! Metadata comment lines may only appear directly after the header.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::assoc::Measure;
use crate::corpus::parse_floats;
use crate::error::{Error, Result};
use crate::util::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Provenance {
    VOo,
    VWo,
    VWor,
    #[default]
    WordSpace,
    ObjectProjected,
    Merged,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::VOo => "v_oo",
            Provenance::VWo => "v_wo",
            Provenance::VWor => "v_wor",
            Provenance::WordSpace => "word_space",
            Provenance::ObjectProjected => "object_projected",
            Provenance::Merged => "merged",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "v_oo" => Provenance::VOo,
            "v_wo" => Provenance::VWo,
            "v_wor" => Provenance::VWor,
            "word_space" => Provenance::WordSpace,
            "object_projected" => Provenance::ObjectProjected,
            "merged" => Provenance::Merged,
            other => return Err(Error::InvalidParam(format!("unknown provenance {other:?}"))),
        })
    }
}

/// Parameters that produced an embedding. Unknown keys survive a round trip
/// through `extra`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingMeta {
    pub measure: Option<Measure>,
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    pub p: Option<f64>,
    pub seed: Option<u64>,
    pub extra: BTreeMap<String, String>,
}

impl EmbeddingMeta {
    fn lines(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(m) = self.measure {
            out.push(("measure".into(), m.to_string()));
        }
        for (key, v) in [("k", self.k), ("alpha", self.alpha), ("p", self.p)] {
            if let Some(v) = v {
                out.push((key.into(), v.to_string()));
            }
        }
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        out.extend(self.extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let float = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| format!("bad #{key} value {v:?}"))
        };
        match key {
            "measure" => self.measure = Some(value.parse().map_err(|e: Error| e.to_string())?),
            "k" => self.k = Some(float(value)?),
            "alpha" => self.alpha = Some(float(value)?),
            "p" => self.p = Some(float(value)?),
            "seed" => {
                self.seed = Some(
                    value
                        .parse()
                        .map_err(|_| format!("bad #seed value {value:?}"))?,
                )
            }
            _ => {
                self.extra.insert(key.to_owned(), value.to_owned());
            }
        }
        Ok(())
    }
}

/// Row-major dense vectors, one per token; row index is the token id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
    pub meta: EmbeddingMeta,
}

impl EmbeddingMatrix {
    /// Validate and assemble. `data` holds `tokens.len() * dim` values in row
    /// order.
    pub fn new(
        tokens: Vec<String>,
        dim: usize,
        data: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam(
                "embedding dimension must be positive".into(),
            ));
        }
        if data.len() != tokens.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} tokens of dimension {dim}",
                data.len(),
                tokens.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "non-finite component in vector for {:?}",
                tokens[i / dim]
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParam(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidParam(format!("duplicate token {t:?}")));
            }
        }
        Ok(EmbeddingMatrix {
            tokens,
            index,
            dim,
            data,
            provenance,
            meta: EmbeddingMeta::default(),
        })
    }

    /// Build from (token, vector) rows.
    pub fn from_rows(
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
        dim: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        for (t, v) in rows {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for {t:?} has {} components, expected {dim}",
                    v.len()
                )));
            }
            tokens.push(t);
            data.extend(v);
        }
        Self::new(tokens, dim, data, provenance)
    }

    pub fn with_meta(mut self, meta: EmbeddingMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.id(token).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Apply `f` to every vector, keeping tokens and metadata.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        let mut dim = None;
        for row in self.data.chunks_exact(self.dim) {
            let out = f(row);
            if *dim.get_or_insert(out.len()) != out.len() {
                return Err(Error::Shape("map_rows produced ragged output".into()));
            }
            data.extend(out);
        }
        let mut m = Self::new(
            self.tokens.clone(),
            dim.unwrap_or(self.dim),
            data,
            self.provenance,
        )?;
        m.meta = self.meta.clone();
        Ok(m)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        self.export_with(path, true)
    }

    /// Write the text format, optionally without metadata comment lines.
    pub fn export_with(&self, path: impl AsRef<Path>, metadata: bool) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "{} {}", self.len(), self.dim)?;
            if metadata {
                writeln!(w, "#provenance {}", self.provenance)?;
                for (k, v) in self.meta.lines() {
                    writeln!(w, "#{k} {v}")?;
                }
            }
            let mut line = String::new();
            for (t, v) in self.rows() {
                line.clear();
                line.push_str(t);
                for x in v {
                    line.push(' ');
                    line.push_str(&fmt_f64(*x));
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::parse(path, 1, "missing `<count> <dim>` header"))?;
        let mut parts = header.split_whitespace();
        let (Some(count), Some(dim), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, 1, "expected `<count> <dim>` header"));
        };
        let count: usize = count
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad token count"))?;
        let dim: usize = dim
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse(path, 1, "bad dimension"))?;

        let mut provenance = Provenance::default();
        let mut meta = EmbeddingMeta::default();
        let mut in_meta = true;
        let mut tokens = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 24));
        let mut seen = HashSet::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line_no = i + 2;
            if in_meta {
                if let Some(rest) = line.strip_prefix('#') {
                    let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                    let value = value.trim();
                    if key == "provenance" {
                        provenance = value.parse()?;
                    } else {
                        meta.set(key, value)
                            .map_err(|m| Error::parse(path, line_no, m))?;
                    }
                    continue;
                }
                in_meta = false;
            }
            let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
            let Some((&token, values)) = fields.split_first() else {
                return Err(Error::parse(path, line_no, "empty line"));
            };
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: dim,
                    found: values.len(),
                });
            }
            data.extend(parse_floats(values, path, line_no)?);
            if !seen.insert(token.to_owned()) {
                return Err(Error::DuplicateToken {
                    path: path.to_path_buf(),
                    line: line_no,
                    token: token.to_owned(),
                });
            }
            tokens.push(token.to_owned());
        }
        if tokens.len() != count {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                expected: count,
                found: tokens.len(),
            });
        }
        Ok(Self::new(tokens, dim, data, provenance)?.with_meta(meta))
    }
}
