//! Exact nearest-neighbour and analogy queries, and the intrinsic
//! distance-based evaluations.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::align::read_token_lines;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidParam(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

impl Metric {
    /// Similarity for cosine, distance for euclidean.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => cosine(a, b),
            Metric::Euclidean => euclidean(a, b),
        }
    }

    /// Distance form: `1 − cos` or the euclidean norm of the difference.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => 1.0 - cosine(a, b),
            Metric::Euclidean => euclidean(a, b),
        }
    }

    fn rank(self, a: &(String, f64), b: &(String, f64)) -> Ordering {
        let by_score = match self {
            Metric::Cosine => b.1.total_cmp(&a.1),
            Metric::Euclidean => a.1.total_cmp(&b.1),
        };
        by_score.then_with(|| a.0.cmp(&b.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Token(&'a str),
    Vector(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub query: String,
    pub metric: Metric,
    pub hits: Vec<(String, f64)>,
}

/// Exact top-`k` by linear scan. Ties are broken by token.
pub fn nearest(
    e: &EmbeddingMatrix,
    query: Query<'_>,
    k: usize,
    metric: Metric,
    exclude: &HashSet<&str>,
) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    let (target, description) = match query {
        Query::Token(t) => (
            e.vector(t)
                .ok_or_else(|| Error::UnknownToken(t.to_owned()))?,
            t.to_owned(),
        ),
        Query::Vector(v) => {
            if v.len() != e.dim() {
                return Err(Error::Shape(format!(
                    "query vector has {} components, embedding dimension is {}",
                    v.len(),
                    e.dim()
                )));
            }
            (v, "<vector>".to_owned())
        }
    };
    let mut scored: Vec<(String, f64)> = e
        .tokens()
        .par_iter()
        .enumerate()
        .filter(|(_, t)| !exclude.contains(t.as_str()))
        .map(|(i, t)| (t.clone(), metric.score(target, e.row(i))))
        .collect();
    let k = k.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| metric.rank(a, b));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| metric.rank(a, b));
    Ok(QueryResult {
        query: description,
        metric,
        hits: scored,
    })
}

/// 3CosAdd: nearest by cosine to `v(b) − v(a) + v(c)`, excluding a, b and c.
pub fn analogy(e: &EmbeddingMatrix, a: &str, b: &str, c: &str, k: usize) -> Result<QueryResult> {
    let look = |t: &str| e.vector(t).ok_or_else(|| Error::UnknownToken(t.to_owned()));
    let (va, vb, vc) = (look(a)?, look(b)?, look(c)?);
    let target: Vec<f64> = (0..e.dim()).map(|i| vb[i] - va[i] + vc[i]).collect();
    let exclude: HashSet<&str> = [a, b, c].into_iter().collect();
    let mut r = nearest(e, Query::Vector(&target), k, Metric::Cosine, &exclude)?;
    r.query = format!("{b} - {a} + {c}");
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairReport {
    pub metric: Metric,
    pub mean_distance: f64,
    pub retained: usize,
    pub skipped: usize,
}

/// Mean distance over token pairs; pairs with an out-of-vocabulary token are
/// skipped and counted.
pub fn eval_word_pairs(
    e: &EmbeddingMatrix,
    pairs: &[(String, String)],
    metric: Metric,
) -> Result<PairReport> {
    let mut sum = 0.0;
    let mut retained = 0;
    for (a, b) in pairs {
        if let (Some(va), Some(vb)) = (e.vector(a), e.vector(b)) {
            sum += metric.distance(va, vb);
            retained += 1;
        }
    }
    let skipped = pairs.len() - retained;
    if retained == 0 {
        return Err(Error::NoPairs { skipped });
    }
    Ok(PairReport {
        metric,
        mean_distance: sum / retained as f64,
        retained,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub metric: Metric,
    pub mean_distance: f64,
    pub pairs: usize,
    pub groups_used: usize,
    pub groups_skipped: usize,
    pub oov_tokens: usize,
}

/// Mean distance over every unordered within-group pair of in-vocabulary
/// tokens.
pub fn eval_object_pairs(
    e: &EmbeddingMatrix,
    groups: &[Vec<String>],
    metric: Metric,
) -> Result<GroupReport> {
    let mut sum = 0.0;
    let mut pairs = 0;
    let mut groups_used = 0;
    let mut oov_tokens = 0;
    for g in groups {
        let vecs: Vec<&[f64]> = g.iter().filter_map(|t| e.vector(t)).collect();
        oov_tokens += g.len() - vecs.len();
        if vecs.len() < 2 {
            continue;
        }
        groups_used += 1;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                sum += metric.distance(vecs[i], vecs[j]);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::NoPairs {
            skipped: oov_tokens,
        });
    }
    Ok(GroupReport {
        metric,
        mean_distance: sum / pairs as f64,
        pairs,
        groups_used,
        groups_skipped: groups.len() - groups_used,
        oov_tokens,
    })
}

/// `<token1> <token2>` per line.
pub fn read_pairs_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    crate::align::read_pairs(path)
}

/// Whitespace-separated tokens per line, one group per line.
pub fn read_groups_file(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    Ok(read_token_lines(path.as_ref())?
        .into_iter()
        .map(|(_, g)| g)
        .collect())
}
