//! Corpus ingestion, vocabularies and pre-extracted object features.
//!
//! A corpus is a JSONL file with one image per line:
//! `{"image_id": "...", "objects": ["dog", ...], "captions": [["a", "dog"], ...]}`.
//! Object features arrive as a text file with a `#dim D` header followed by
//! `<image_id> <instance_index> <object_name> <f1> ... <fD>` rows.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::util::fmt_f64;

/// One image: its detected object instances and tokenized captions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentRecord {
    pub image_id: String,
    pub objects: Vec<String>,
    pub captions: Vec<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    objects: Vec<String>,
    captions: Vec<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub lowercase: bool,
    /// Maximum tolerated fraction of malformed lines before ingestion aborts.
    pub error_threshold: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            lowercase: true,
            error_threshold: 0.01,
        }
    }
}

/// Normalize an object name: optional lowercasing, internal whitespace runs
/// collapsed to a single underscore.
pub fn normalize_object(name: &str, lowercase: bool) -> String {
    let joined = name.split_whitespace().collect::<Vec<_>>().join("_");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

fn normalize_word(word: &str, lowercase: bool) -> String {
    if lowercase {
        word.to_lowercase()
    } else {
        word.to_owned()
    }
}

fn valid_token(t: &str) -> bool {
    !t.is_empty() && !t.chars().any(char::is_whitespace)
}

/// Streaming reader over a JSONL corpus. Yields one result per non-blank line,
/// in file order; malformed lines surface as [`Error::Parse`] with their line
/// number and do not stop the stream.
pub struct CorpusReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    lowercase: bool,
    seen_ids: HashSet<String>,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(CorpusReader {
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
            lowercase,
            seen_ids: HashSet::new(),
        })
    }

    fn parse_line(&mut self, line: &str) -> Result<DocumentRecord> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
            Error::parse(&self.path, self.line_no, format!("schema violation: {e}"))
        })?;
        let image_id = raw.image_id.trim().to_owned();
        if image_id.is_empty() {
            return Err(Error::parse(&self.path, self.line_no, "empty image_id"));
        }
        let mut objects = Vec::with_capacity(raw.objects.len());
        for o in &raw.objects {
            let o = normalize_object(o, self.lowercase);
            if o.is_empty() {
                return Err(Error::parse(&self.path, self.line_no, "empty object token"));
            }
            objects.push(o);
        }
        let mut captions = Vec::with_capacity(raw.captions.len());
        for cap in raw.captions {
            let mut words = Vec::with_capacity(cap.len());
            for w in cap {
                if !valid_token(&w) {
                    return Err(Error::parse(
                        &self.path,
                        self.line_no,
                        format!("invalid word token {w:?}"),
                    ));
                }
                words.push(normalize_word(&w, self.lowercase));
            }
            captions.push(words);
        }
        if !self.seen_ids.insert(image_id.clone()) {
            return Err(Error::parse(
                &self.path,
                self.line_no,
                format!("duplicate image_id {image_id:?}"),
            ));
        }
        Ok(DocumentRecord {
            image_id,
            objects,
            captions,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<DocumentRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line(&line));
        }
    }
}

/// Outcome of a full ingestion pass.
#[derive(Debug)]
pub struct IngestedCorpus {
    pub records: Vec<DocumentRecord>,
    /// Per-line errors for lines that were skipped.
    pub errors: Vec<Error>,
}

/// Read a whole corpus, collecting per-line errors. Fails if the fraction of
/// malformed lines exceeds `opts.error_threshold`.
pub fn ingest_corpus(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<IngestedCorpus> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in CorpusReader::open(path, opts.lowercase)? {
        match item {
            Ok(r) => records.push(r),
            Err(e @ Error::Parse { .. }) => errors.push(e),
            Err(e) => return Err(e),
        }
    }
    let total = records.len() + errors.len();
    if !errors.is_empty() {
        log::warn!(
            "{}: {} malformed lines skipped",
            path.display(),
            errors.len()
        );
        let frac = errors.len() as f64 / total as f64;
        if frac > opts.error_threshold {
            return Err(Error::TooManyErrors {
                path: path.to_path_buf(),
                bad: errors.len(),
                total,
                threshold: opts.error_threshold,
                first: errors[0].to_string(),
            });
        }
    }
    Ok(IngestedCorpus { records, errors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VocabKind {
    Word,
    Object,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Word => "word",
            VocabKind::Object => "object",
        })
    }
}

impl FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(VocabKind::Word),
            "object" => Ok(VocabKind::Object),
            other => Err(Error::InvalidParam(format!(
                "unknown vocabulary kind {other:?}"
            ))),
        }
    }
}

/// Token ↔ dense id bijection with occurrence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    min_count: u64,
}

impl Vocabulary {
    /// Build from (token, count) pairs. Ids follow descending count, then
    /// lexicographic token order.
    pub fn from_counts(
        kind: VocabKind,
        counts: impl IntoIterator<Item = (String, u64)>,
        min_count: u64,
    ) -> Self {
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (tokens, counts): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            kind,
            tokens,
            counts,
            index,
            min_count,
        }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "#vocab {} {} {}", self.kind, self.min_count, self.len())?;
            for (t, c) in self.tokens.iter().zip(&self.counts) {
                writeln!(w, "{t} {c}")?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "#vocab" {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: header.clone(),
            });
        }
        let kind: VocabKind = fields[1].parse()?;
        let bad_header = || Error::parse(path, 1, "malformed vocabulary header");
        let min_count: u64 = fields[2].parse().map_err(|_| bad_header())?;
        let expected: usize = fields[3].parse().map_err(|_| bad_header())?;
        let mut entries = Vec::with_capacity(expected);
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line_no = i + 2;
            let mut parts = line.split_whitespace();
            let (Some(tok), Some(cnt), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, line_no, "expected `<token> <count>`"));
            };
            let cnt: u64 = cnt
                .parse()
                .map_err(|_| Error::parse(path, line_no, "bad count"))?;
            if !seen.insert(tok.to_owned()) {
                return Err(Error::DuplicateToken {
                    path: path.to_path_buf(),
                    line: line_no,
                    token: tok.to_owned(),
                });
            }
            entries.push((tok.to_owned(), cnt));
        }
        if entries.len() != expected {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                expected,
                found: entries.len(),
            });
        }
        let vocab = Vocabulary::from_counts(kind, entries.iter().cloned(), min_count);
        if vocab.tokens.len() != entries.len()
            || vocab.tokens.iter().zip(&entries).any(|(t, (e, _))| t != e)
        {
            return Err(Error::parse(
                path,
                1,
                "entries are not in canonical id order",
            ));
        }
        Ok(vocab)
    }
}

/// Count tokens of the requested kind over `docs` and keep those with
/// `count >= min_count`.
pub fn build_vocab<'a>(
    docs: impl IntoIterator<Item = &'a DocumentRecord>,
    kind: VocabKind,
    min_count: u64,
) -> Vocabulary {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        match kind {
            VocabKind::Object => {
                for o in &doc.objects {
                    *counts.entry(o).or_default() += 1;
                }
            }
            VocabKind::Word => {
                for w in doc.captions.iter().flatten() {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    Vocabulary::from_counts(
        kind,
        counts.into_iter().map(|(t, c)| (t.to_owned(), c)),
        min_count,
    )
}

/// Mean feature vector per object, keyed in object-vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatureStore {
    dim: usize,
    names: Vec<String>,
    means: Vec<Vec<f64>>,
    instance_counts: Vec<u64>,
    index: HashMap<String, usize>,
}

/// Result of reading a feature file.
#[derive(Debug)]
pub struct FeatureIngest {
    pub store: ObjectFeatureStore,
    /// Instance rows whose object was not in the vocabulary.
    pub skipped_unknown: usize,
}

impl ObjectFeatureStore {
    /// Assemble a store from precomputed means. Every vector must have
    /// `dim` finite components and every count must be positive.
    pub fn from_means(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>, u64)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam(
                "feature dimension must be positive".into(),
            ));
        }
        let mut store = ObjectFeatureStore {
            dim,
            names: Vec::new(),
            means: Vec::new(),
            instance_counts: Vec::new(),
            index: HashMap::new(),
        };
        for (name, mean, count) in entries {
            if mean.len() != dim {
                return Err(Error::Shape(format!(
                    "feature vector for {name:?} has {} components, expected {dim}",
                    mean.len()
                )));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!("non-finite mean for {name:?}")));
            }
            if count == 0 {
                return Err(Error::InvalidParam(format!(
                    "zero instance count for {name:?}"
                )));
            }
            if store
                .index
                .insert(name.clone(), store.names.len())
                .is_some()
            {
                return Err(Error::InvalidParam(format!("duplicate object {name:?}")));
            }
            store.names.push(name);
            store.means.push(mean);
            store.instance_counts.push(count);
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<(&[f64], u64)> {
        self.index
            .get(name)
            .map(|&i| (self.means[i].as_slice(), self.instance_counts[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64], u64)> {
        self.names
            .iter()
            .zip(&self.means)
            .zip(&self.instance_counts)
            .map(|((n, m), c)| (n.as_str(), m.as_slice(), *c))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "#features {} {}", self.dim, self.len())?;
            for (name, mean, count) in self.iter() {
                write!(w, "{name} {count}")?;
                for v in mean {
                    write!(w, " {}", fmt_f64(*v))?;
                }
                writeln!(w)?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "#features" {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: header.clone(),
            });
        }
        let dim: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad dimension"))?;
        let expected: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad count"))?;
        let mut entries = Vec::with_capacity(expected);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line_no = i + 2;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != dim + 2 {
                return Err(Error::DimensionMismatch {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: dim,
                    found: parts.len().saturating_sub(2),
                });
            }
            let count: u64 = parts[1]
                .parse()
                .map_err(|_| Error::parse(path, line_no, "bad instance count"))?;
            let mean = parse_floats(&parts[2..], path, line_no)?;
            entries.push((parts[0].to_owned(), mean, count));
        }
        if entries.len() != expected {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                expected,
                found: entries.len(),
            });
        }
        ObjectFeatureStore::from_means(dim, entries)
    }
}

pub(crate) fn parse_floats(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad float {f:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    line,
                })
            }
        })
        .collect()
}

/// Read per-instance feature rows and average them per object. Objects not in
/// `vocab` are skipped and counted.
pub fn ingest_object_features(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    lowercase: bool,
) -> Result<FeatureIngest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim: Option<usize> = None;
    let mut sums: Vec<Option<(Vec<f64>, u64)>> = vec![None; vocab.len()];
    let mut skipped_unknown = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            if parts.next() == Some("dim") {
                if dim.is_some() {
                    return Err(Error::parse(path, line_no, "repeated #dim header"));
                }
                let d: usize = parts
                    .next()
                    .and_then(|d| d.parse().ok())
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::parse(path, line_no, "malformed #dim header"))?;
                dim = Some(d);
            }
            continue;
        }
        let Some(d) = dim else {
            return Err(Error::parse(path, line_no, "missing `#dim D` header"));
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::parse(
                path,
                line_no,
                "expected `<image_id> <instance_index> <object_name> <f1> ... <fD>`",
            ));
        }
        if fields[1].parse::<u64>().is_err() {
            return Err(Error::parse(path, line_no, "bad instance index"));
        }
        if fields.len() - 3 != d {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                line: line_no,
                expected: d,
                found: fields.len() - 3,
            });
        }
        let values = parse_floats(&fields[3..], path, line_no)?;
        let name = normalize_object(fields[2], lowercase);
        let Some(id) = vocab.id(&name) else {
            skipped_unknown += 1;
            continue;
        };
        let slot = sums[id].get_or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in slot.0.iter_mut().zip(&values) {
            *s += v;
        }
        slot.1 += 1;
    }
    if skipped_unknown > 0 {
        log::warn!(
            "{}: {skipped_unknown} instance rows skipped (object not in vocabulary)",
            path.display()
        );
    }
    let Some(dim) = dim else {
        return Err(Error::parse(path, 1, "missing `#dim D` header"));
    };
    let entries = sums.into_iter().enumerate().filter_map(|(id, slot)| {
        slot.map(|(sum, n)| {
            let mean = sum.into_iter().map(|s| s / n as f64).collect();
            (vocab.tokens()[id].clone(), mean, n)
        })
    });
    let store = ObjectFeatureStore::from_means(dim, entries)?;
    Ok(FeatureIngest {
        store,
        skipped_unknown,
    })
}
