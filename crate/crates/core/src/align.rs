//! Cross-modal alignment: object features reduced to the word dimension,
//! mapped into word space by an orthogonal transform (optionally refined with
//! a triplet hinge loss), then combined with word vectors and merged with the
//! co-location embeddings.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_floats, ObjectFeatureStore};
use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::factor::{eigenweight, truncated_svd, ContextScaling, SvdOptions};
use crate::util::fmt_f64;

/// Largest entry of `|QᵀQ − I|`.
pub fn orthogonality_error(q: &DMatrix<f64>) -> f64 {
    let n = q.ncols();
    (q.tr_mul(q) - DMatrix::<f64>::identity(n, n)).amax()
}

/// Nearest orthogonal matrix (polar factor) via SVD.
pub fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

/// Stack the per-object means, center the columns and keep the rank-`d`
/// factor `U_d Σ_d^{1/2}` as a `d`-dimensional vector per object.
pub fn reduce_object_features(
    store: &ObjectFeatureStore,
    d: usize,
    seed: u64,
    opts: &SvdOptions,
) -> Result<EmbeddingMatrix> {
    let (n, dim) = (store.len(), store.dim());
    if store.is_empty() {
        return Err(Error::Degenerate("empty object feature store".into()));
    }
    if d == 0 || d > n.min(dim) {
        return Err(Error::InvalidParam(format!(
            "target dimension {d} outside 1..={} ({n} objects, feature dimension {dim})",
            n.min(dim)
        )));
    }
    let centered = centered_features(store);
    let scale = store
        .iter()
        .flat_map(|(_, m, _)| m.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if centered.amax() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(
            "degenerate feature matrix: all objects share one vector".into(),
        ));
    }
    let svd = truncated_svd(&centered, d, seed, opts)?;
    let (w, _) = eigenweight(&svd, 0.5, ContextScaling::Symmetric);
    let rows = store
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), w.row(i).iter().copied().collect()));
    let mut e = EmbeddingMatrix::from_rows(rows, d, Provenance::ObjectProjected)?;
    e.meta.seed = Some(seed);
    e.meta.p = Some(0.5);
    Ok(e)
}

/// Column-centered `objects × D` matrix of mean features.
pub fn centered_features(store: &ObjectFeatureStore) -> DMatrix<f64> {
    let mut x = DMatrix::from_fn(store.len(), store.dim(), |i, j| {
        store.get(&store.names()[i]).expect("stored name").0[j]
    });
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    x
}

/// Orthogonal map `x ↦ xQ` between two spaces of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMap {
    q: DMatrix<f64>,
    anchors: Vec<(String, String)>,
    fit_residual: f64,
}

impl ProjectionMap {
    pub fn new(q: DMatrix<f64>, anchors: Vec<(String, String)>, fit_residual: f64) -> Result<Self> {
        if !q.is_square() {
            return Err(Error::Shape("projection matrix must be square".into()));
        }
        let err = orthogonality_error(&q);
        if err > 1e-6 {
            return Err(Error::InvalidParam(format!(
                "projection is not orthogonal (|QᵀQ - I|max = {err:e})"
            )));
        }
        if anchors.is_empty() {
            return Err(Error::InvalidParam("projection has no anchors".into()));
        }
        Ok(ProjectionMap {
            q,
            anchors,
            fit_residual,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn anchors(&self) -> &[(String, String)] {
        &self.anchors
    }

    pub fn fit_residual(&self) -> f64 {
        self.fit_residual
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.q)
    }

    /// Row vector times Q.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                x.iter()
                    .zip(self.q.column(j).iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Map every vector of `e`; provenance becomes `object_projected`.
    pub fn project(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if e.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding dimension {} vs projection dimension {}",
                e.dim(),
                self.dim()
            )));
        }
        let mut out = e.map_rows(|row| self.apply(row))?;
        out.provenance = Provenance::ObjectProjected;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "PROJ v1 {} {}", self.dim(), self.anchors.len())?;
            writeln!(w, "#residual {}", fmt_f64(self.fit_residual))?;
            for (o, t) in &self.anchors {
                writeln!(w, "{o} {t}")?;
            }
            for i in 0..self.dim() {
                let row: Vec<String> = self.q.row(i).iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let header: Vec<&str> = lines
            .first()
            .map(|l| l.split_whitespace().collect())
            .unwrap_or_default();
        if header.len() != 4 || header[0] != "PROJ" || header[1] != "v1" {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: lines.first().cloned().unwrap_or_default(),
            });
        }
        let d: usize = header[2]
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad dimension"))?;
        let n: usize = header[3]
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad anchor count"))?;
        if lines.len() != 2 + n + d {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                expected: 2 + n + d,
                found: lines.len(),
            });
        }
        let residual = lines[1]
            .strip_prefix("#residual ")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::parse(path, 2, "expected `#residual <value>`"))?;
        let mut anchors = Vec::with_capacity(n);
        for (i, line) in lines[2..2 + n].iter().enumerate() {
            let mut parts = line.split_whitespace();
            let (Some(o), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, i + 3, "expected `<object> <word>`"));
            };
            anchors.push((o.to_owned(), t.to_owned()));
        }
        let mut data = Vec::with_capacity(d * d);
        for (i, line) in lines[2 + n..].iter().enumerate() {
            let line_no = 3 + n + i;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != d {
                return Err(Error::DimensionMismatch {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: d,
                    found: fields.len(),
                });
            }
            data.extend(parse_floats(&fields, path, line_no)?);
        }
        ProjectionMap::new(DMatrix::from_row_slice(d, d, &data), anchors, residual)
    }
}

/// Anchor pairs matching identical token strings in both spaces, in source
/// order.
pub fn lexical_anchors(
    source: &EmbeddingMatrix,
    target: &EmbeddingMatrix,
) -> Vec<(String, String)> {
    source
        .tokens()
        .iter()
        .filter(|t| target.contains(t))
        .map(|t| (t.clone(), t.clone()))
        .collect()
}

/// Read `<object_token> <word_token>` lines (`#` comments ignored).
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let rows = read_token_lines(path)?;
    rows.into_iter()
        .map(|(line, fields)| match fields.as_slice() {
            [a, b] => Ok((a.clone(), b.clone())),
            _ => Err(Error::parse(path, line, "expected two tokens")),
        })
        .collect()
}

/// Read `<anchor> <positive> <negative>` lines.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let rows = read_token_lines(path)?;
    rows.into_iter()
        .map(|(line, fields)| match fields.as_slice() {
            [a, p, n] => Ok(Triplet {
                anchor: a.clone(),
                positive: p.clone(),
                negative: n.clone(),
            }),
            _ => Err(Error::parse(path, line, "expected three tokens")),
        })
        .collect()
}

pub(crate) fn read_token_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.split_whitespace().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn gather(
    e: &EmbeddingMatrix,
    tokens: impl Iterator<Item = String>,
    n: usize,
) -> Result<DMatrix<f64>> {
    let d = e.dim();
    let mut data = Vec::with_capacity(n * d);
    for t in tokens {
        let v = e.vector(&t).ok_or(Error::UnknownToken(t))?;
        data.extend_from_slice(v);
    }
    Ok(DMatrix::from_row_slice(n, d, &data))
}

/// Orthogonal Procrustes: `Q = argmin_{QᵀQ=I} ‖XQ − Y‖_F` with `Q = U Vᵀ`
/// from the SVD of `XᵀY`.
pub fn fit_orthogonal(
    source: &EmbeddingMatrix,
    target: &EmbeddingMatrix,
    anchors: &[(String, String)],
) -> Result<ProjectionMap> {
    if source.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "source dimension {} vs target dimension {}",
            source.dim(),
            target.dim()
        )));
    }
    if anchors.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "orthogonal fit needs at least 2 anchors, got {}",
            anchors.len()
        )));
    }
    let n = anchors.len();
    let x = gather(source, anchors.iter().map(|a| a.0.clone()), n)?;
    let y = gather(target, anchors.iter().map(|a| a.1.clone()), n)?;
    let q = polar(&x.tr_mul(&y));
    let residual = (&x * &q - &y).norm();
    ProjectionMap::new(q, anchors.to_vec(), residual)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    /// Source-space (object) token.
    pub anchor: String,
    /// Target-space token that should end up close.
    pub positive: String,
    /// Target-space token that should end up far.
    pub negative: String,
}

/// For each anchor pair draw one triplet: positive is the paired word, the
/// negative is uniform over the remaining target tokens.
pub fn sample_triplets(
    anchors: &[(String, String)],
    target: &EmbeddingMatrix,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if target.len() < 2 {
        return Err(Error::Degenerate(
            "need at least two target tokens to sample negatives".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    anchors
        .iter()
        .map(|(o, w)| {
            let pos = target.id(w).ok_or_else(|| Error::UnknownToken(w.clone()))?;
            let mut neg = rng.random_range(0..target.len() - 1);
            if neg >= pos {
                neg += 1;
            }
            Ok(Triplet {
                anchor: o.clone(),
                positive: w.clone(),
                negative: target.tokens()[neg].clone(),
            })
        })
        .collect()
}

/// Triplets with their vectors looked up once.
#[derive(Clone, Debug)]
pub struct TripletSet {
    anchors: Vec<DVector<f64>>,
    positives: Vec<DVector<f64>>,
    negatives: Vec<DVector<f64>>,
    pub margin: f64,
}

impl TripletSet {
    pub fn resolve(
        source: &EmbeddingMatrix,
        target: &EmbeddingMatrix,
        triplets: &[Triplet],
        margin: f64,
    ) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::InvalidParam("empty triplet list".into()));
        }
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "margin must be positive, got {margin}"
            )));
        }
        if source.dim() != target.dim() {
            return Err(Error::Shape("source and target dimensions differ".into()));
        }
        let look = |e: &EmbeddingMatrix, t: &str| {
            e.vector(t)
                .map(DVector::from_column_slice)
                .ok_or_else(|| Error::UnknownToken(t.to_owned()))
        };
        let mut set = TripletSet {
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            margin,
        };
        for t in triplets {
            set.anchors.push(look(source, &t.anchor)?);
            set.positives.push(look(target, &t.positive)?);
            set.negatives.push(look(target, &t.negative)?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn hinge(&self, q: &DMatrix<f64>, i: usize) -> f64 {
        let mapped = q.tr_mul(&self.anchors[i]);
        (&mapped - &self.positives[i]).norm_squared()
            - (&mapped - &self.negatives[i]).norm_squared()
            + self.margin
    }

    /// Mean of `max(0, ‖aQ − p‖² − ‖aQ − n‖² + margin)`.
    pub fn loss(&self, q: &DMatrix<f64>) -> f64 {
        let total: f64 = (0..self.len()).map(|i| self.hinge(q, i).max(0.0)).sum();
        total / self.len() as f64
    }

    /// Gradient of [`TripletSet::loss`] in Q. Each active triplet contributes
    /// `2 aᵀ(n − p)`; the quadratic terms in Q cancel.
    pub fn gradient(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let d = q.nrows();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..self.len() {
            if self.hinge(q, i) > 0.0 {
                let diff = &self.negatives[i] - &self.positives[i];
                g.ger(2.0, &self.anchors[i], &diff, 1.0);
            }
        }
        g / self.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletParams {
    pub margin: f64,
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for TripletParams {
    fn default() -> Self {
        TripletParams {
            margin: 0.2,
            step_size: 0.01,
            epochs: 50,
        }
    }
}

const MAX_HALVINGS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    /// Loss before the first epoch followed by the loss after each epoch.
    pub losses: Vec<f64>,
    /// Orthogonality error after each epoch.
    pub orthogonality: Vec<f64>,
    pub final_step: f64,
    /// False when an epoch exhausted its step halvings without decreasing the
    /// loss; refinement stops there.
    pub converged: bool,
}

/// Full-batch gradient descent on the triplet hinge loss, retracting Q onto
/// the orthogonal group after every epoch. A step that would increase the
/// loss is retried with half the step size.
pub fn triplet_refine(
    pm: &ProjectionMap,
    set: &TripletSet,
    params: &TripletParams,
) -> Result<(ProjectionMap, RefineReport)> {
    if set.is_empty() {
        return Err(Error::InvalidParam("empty triplet list".into()));
    }
    if set.anchors[0].len() != pm.dim() {
        return Err(Error::Shape(
            "triplet vectors do not match projection dimension".into(),
        ));
    }
    if !params.step_size.is_finite() || params.step_size <= 0.0 {
        return Err(Error::InvalidParam("step size must be positive".into()));
    }
    let mut q = pm.q.clone();
    let mut loss = set.loss(&q);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut step = params.step_size;
    let mut report = RefineReport {
        losses: vec![loss],
        orthogonality: Vec::new(),
        final_step: step,
        converged: true,
    };
    'epochs: for epoch in 1..=params.epochs {
        let g = set.gradient(&q);
        if g.amax() == 0.0 {
            report.losses.push(loss);
            report.orthogonality.push(orthogonality_error(&q));
            continue;
        }
        let mut halvings = 0;
        loop {
            let candidate = polar(&(&q - &g * step));
            let cand_loss = set.loss(&candidate);
            if !cand_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            if cand_loss <= loss {
                q = candidate;
                loss = cand_loss;
                break;
            }
            if halvings == MAX_HALVINGS {
                log::warn!("triplet refinement stalled at epoch {epoch} (loss {loss})");
                report.converged = false;
                break 'epochs;
            }
            step /= 2.0;
            halvings += 1;
        }
        report.losses.push(loss);
        report.orthogonality.push(orthogonality_error(&q));
    }
    report.final_step = step;
    Ok((
        ProjectionMap::new(q, pm.anchors.clone(), pm.fit_residual)?,
        report,
    ))
}

/// Where a token of a composed embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    Paired,
    WordOnly,
    ObjectOnly,
}

#[derive(Clone, Debug)]
pub struct Composition {
    pub embedding: EmbeddingMatrix,
    /// Parallel to `embedding.tokens()`.
    pub membership: Vec<Membership>,
}

/// `v(t) = λ·word(t) + (1 − λ)·object(t)` for tokens in both spaces; tokens in
/// one space keep that vector. Word tokens come first, then object-only
/// tokens.
pub fn compose_vwor(
    word_space: &EmbeddingMatrix,
    projected: &EmbeddingMatrix,
    lambda: f64,
) -> Result<Composition> {
    if word_space.dim() != projected.dim() {
        return Err(Error::Shape(format!(
            "word dimension {} vs object dimension {}",
            word_space.dim(),
            projected.dim()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParam(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut rows = Vec::with_capacity(word_space.len() + projected.len());
    let mut membership = Vec::with_capacity(rows.capacity());
    for (t, w) in word_space.rows() {
        match projected.vector(t) {
            Some(o) => {
                let v = w
                    .iter()
                    .zip(o)
                    .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                    .collect();
                rows.push((t.to_owned(), v));
                membership.push(Membership::Paired);
            }
            None => {
                rows.push((t.to_owned(), w.to_vec()));
                membership.push(Membership::WordOnly);
            }
        }
    }
    for (t, o) in projected.rows() {
        if !word_space.contains(t) {
            rows.push((t.to_owned(), o.to_vec()));
            membership.push(Membership::ObjectOnly);
        }
    }
    let mut embedding = EmbeddingMatrix::from_rows(rows, word_space.dim(), Provenance::VWor)?;
    let count = |m: Membership| membership.iter().filter(|&&x| x == m).count().to_string();
    embedding
        .meta
        .extra
        .insert("lambda".into(), lambda.to_string());
    embedding
        .meta
        .extra
        .insert("paired".into(), count(Membership::Paired));
    embedding
        .meta
        .extra
        .insert("word_only".into(), count(Membership::WordOnly));
    embedding
        .meta
        .extra
        .insert("object_only".into(), count(Membership::ObjectOnly));
    Ok(Composition {
        embedding,
        membership,
    })
}

/// Merge output together with the alignments fitted for it.
#[derive(Clone, Debug)]
pub struct Merged {
    pub embedding: EmbeddingMatrix,
    /// Weights divided by their sum, in (v_oo, v_wo, v_wor) order.
    pub weights: [f64; 3],
    pub voo_alignment: Option<ProjectionMap>,
    pub vwo_alignment: Option<ProjectionMap>,
}

/// Weighted average of v_oo, v_wo and v_wor after aligning the first two into
/// v_wor's space over shared tokens. Each token averages over the spaces (with
/// positive weight) that contain it.
pub fn merge(
    voo: &EmbeddingMatrix,
    vwo: &EmbeddingMatrix,
    vwor: &EmbeddingMatrix,
    weights: [f64; 3],
) -> Result<Merged> {
    if voo.dim() != vwor.dim() || vwo.dim() != vwor.dim() {
        return Err(Error::Shape(format!(
            "merge dimensions differ: v_oo {}, v_wo {}, v_wor {}",
            voo.dim(),
            vwo.dim(),
            vwor.dim()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParam(format!(
            "weights must be non-negative, got {weights:?}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidParam("weights are all zero".into()));
    }
    let norm = weights.map(|w| w / sum);

    let align = |space: &EmbeddingMatrix,
                 name: &str,
                 w: f64|
     -> Result<Option<(EmbeddingMatrix, ProjectionMap)>> {
        if w == 0.0 {
            return Ok(None);
        }
        let anchors = lexical_anchors(space, vwor);
        if anchors.len() < 2 {
            return Err(Error::Degenerate(format!(
                "{name} shares {} token(s) with v_wor; at least 2 are needed to align",
                anchors.len()
            )));
        }
        let pm = fit_orthogonal(space, vwor, &anchors)?;
        let mapped = space.map_rows(|r| pm.apply(r))?;
        Ok(Some((mapped, pm)))
    };
    let aligned_oo = align(voo, "v_oo", norm[0])?;
    let aligned_wo = align(vwo, "v_wo", norm[1])?;

    let spaces: Vec<(&EmbeddingMatrix, f64)> = [
        aligned_oo.as_ref().map(|a| (&a.0, norm[0])),
        aligned_wo.as_ref().map(|a| (&a.0, norm[1])),
        (norm[2] > 0.0).then_some((vwor, norm[2])),
    ]
    .into_iter()
    .flatten()
    .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for (space, _) in spaces.iter().rev() {
        for t in space.tokens() {
            if seen.insert(t.as_str()) {
                order.push(t);
            }
        }
    }

    let d = vwor.dim();
    let rows = order.into_iter().map(|t| {
        let present: Vec<(&[f64], f64)> = spaces
            .iter()
            .filter_map(|(s, w)| s.vector(t).map(|v| (v, *w)))
            .collect();
        let total: f64 = present.iter().map(|p| p.1).sum();
        let mut v = vec![0.0; d];
        for (x, w) in present {
            let c = w / total;
            for (acc, xi) in v.iter_mut().zip(x) {
                *acc += c * xi;
            }
        }
        (t.to_owned(), v)
    });
    let mut embedding = EmbeddingMatrix::from_rows(rows, d, Provenance::Merged)?;
    embedding.meta.seed = vwor.meta.seed;
    embedding.meta.extra.insert(
        "weights".into(),
        norm.iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    Ok(Merged {
        embedding,
        weights: norm,
        voo_alignment: aligned_oo.map(|a| a.1),
        vwo_alignment: aligned_wo.map(|a| a.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        g.qr().q()
    }

    fn emb(prefix: &str, m: &DMatrix<f64>, prov: Provenance) -> EmbeddingMatrix {
        let rows =
            (0..m.nrows()).map(|i| (format!("{prefix}{i}"), m.row(i).iter().copied().collect()));
        EmbeddingMatrix::from_rows(rows, m.ncols(), prov).unwrap()
    }

    fn anchors(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("t{i}"), format!("t{i}"))).collect()
    }

    #[test]
    fn identity_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
        let e = emb("t", &x, Provenance::WordSpace);
        let pm = fit_orthogonal(&e, &e, &anchors(6)).unwrap();
        assert!((pm.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        assert!(pm.fit_residual() < 1e-10);
    }

    #[test]
    fn planted_recovery_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 5;
        let x = DMatrix::from_fn(20, d, |_, _| StandardNormal.sample(&mut rng));
        let qstar = random_orthogonal(d, &mut rng);
        let src = emb("t", &x, Provenance::ObjectProjected);
        let tgt = emb("t", &(&x * &qstar), Provenance::WordSpace);
        let pm = fit_orthogonal(&src, &tgt, &anchors(20)).unwrap();
        assert!((pm.matrix() - &qstar).norm() < 1e-8);

        let noise = DMatrix::from_fn(20, d, |_, _| {
            0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let tgt = emb("t", &(&x * &qstar + &noise), Provenance::WordSpace);
        let pm = fit_orthogonal(&src, &tgt, &anchors(20)).unwrap();
        assert!(pm.fit_residual() <= noise.norm());
        assert!((pm.matrix() - &qstar).norm() < 0.05);
    }

    #[test]
    fn fit_errors() {
        let a = emb("t", &DMatrix::identity(3, 3), Provenance::WordSpace);
        let b = emb("t", &DMatrix::identity(3, 2), Provenance::WordSpace);
        assert!(matches!(
            fit_orthogonal(&a, &b, &anchors(3)),
            Err(Error::Shape(_))
        ));
        assert!(fit_orthogonal(&a, &a, &anchors(1)).is_err());
        assert!(matches!(
            fit_orthogonal(
                &a,
                &a,
                &[("t0".into(), "t0".into()), ("zz".into(), "t1".into())]
            ),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn reduce_degenerate_and_range() {
        let store = ObjectFeatureStore::from_means(
            3,
            (0..4).map(|i| (format!("o{i}"), vec![1.0, 2.0, 3.0], 1)),
        )
        .unwrap();
        assert!(matches!(
            reduce_object_features(&store, 2, 0, &SvdOptions::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(reduce_object_features(&store, 4, 0, &SvdOptions::default()).is_err());
    }

    #[test]
    fn reduce_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ObjectFeatureStore::from_means(
            6,
            (0..5).map(|i| {
                (
                    format!("o{i}"),
                    (0..6).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    1,
                )
            }),
        )
        .unwrap();
        // Centered 5x6 data has rank 4 = objects - 1.
        let c = centered_features(&store);
        let svd = truncated_svd(&c, 4, 9, &SvdOptions::default()).unwrap();
        assert!((svd.reconstruct() - &c).amax() < 1e-6);
        let e = reduce_object_features(&store, 4, 9, &SvdOptions::default()).unwrap();
        assert_eq!(e.len(), 5);
        assert_eq!(e.dim(), 4);
        assert_eq!(e.tokens()[0], "o0");
    }

    fn toy_triplet_setup() -> (EmbeddingMatrix, EmbeddingMatrix, Vec<Triplet>) {
        let src = EmbeddingMatrix::from_rows(
            [("obj".to_string(), vec![1.0, 0.0])],
            2,
            Provenance::ObjectProjected,
        )
        .unwrap();
        let tgt = EmbeddingMatrix::from_rows(
            [
                ("near".to_string(), vec![0.0, 1.0]),
                ("far".to_string(), vec![1.0, 0.0]),
            ],
            2,
            Provenance::WordSpace,
        )
        .unwrap();
        let t = vec![Triplet {
            anchor: "obj".into(),
            positive: "near".into(),
            negative: "far".into(),
        }];
        (src, tgt, t)
    }

    #[test]
    fn single_violating_triplet_decreases() {
        // Q = I maps obj onto the negative: loss = 2 - 0 + 0.2.
        let (src, tgt, t) = toy_triplet_setup();
        let set = TripletSet::resolve(&src, &tgt, &t, 0.2).unwrap();
        let pm = ProjectionMap::new(
            DMatrix::identity(2, 2),
            vec![("obj".into(), "near".into())],
            0.0,
        )
        .unwrap();
        assert!((set.loss(pm.matrix()) - 2.2).abs() < 1e-12);
        let (refined, report) = triplet_refine(
            &pm,
            &set,
            &TripletParams {
                margin: 0.2,
                step_size: 0.1,
                epochs: 1,
            },
        )
        .unwrap();
        assert!(report.losses[1] < report.losses[0]);
        assert!(refined.orthogonality_error() <= 1e-6);
    }

    #[test]
    fn zero_loss_is_fixed_point() {
        let (src, tgt, mut t) = toy_triplet_setup();
        let tr = &mut t[0];
        std::mem::swap(&mut tr.positive, &mut tr.negative);
        let set = TripletSet::resolve(&src, &tgt, &t, 0.2).unwrap();
        let pm = ProjectionMap::new(
            DMatrix::identity(2, 2),
            vec![("obj".into(), "far".into())],
            0.0,
        )
        .unwrap();
        assert_eq!(set.loss(pm.matrix()), 0.0);
        let (refined, report) = triplet_refine(&pm, &set, &TripletParams::default()).unwrap();
        assert_eq!(refined.matrix(), pm.matrix());
        assert!(report.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn triplet_errors() {
        let (src, tgt, t) = toy_triplet_setup();
        assert!(TripletSet::resolve(&src, &tgt, &[], 0.2).is_err());
        assert!(TripletSet::resolve(&src, &tgt, &t, 0.0).is_err());
        let mut bad = t.clone();
        bad[0].negative = "missing".into();
        assert!(matches!(
            TripletSet::resolve(&src, &tgt, &bad, 0.2),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn sampled_triplets_are_valid_and_seeded() {
        let tgt = emb("t", &DMatrix::identity(5, 2), Provenance::WordSpace);
        let a = anchors(5);
        let t1 = sample_triplets(&a, &tgt, 4).unwrap();
        assert_eq!(t1, sample_triplets(&a, &tgt, 4).unwrap());
        for t in &t1 {
            assert_eq!(t.anchor, t.positive);
            assert_ne!(t.positive, t.negative);
            assert!(tgt.contains(&t.negative));
        }
    }

    #[test]
    fn projection_save_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pm = ProjectionMap::new(random_orthogonal(4, &mut rng), anchors(3), 0.125).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.proj");
        pm.save(&p).unwrap();
        assert_eq!(ProjectionMap::load(&p).unwrap(), pm);
        assert!(ProjectionMap::new(DMatrix::from_element(2, 2, 1.0), anchors(1), 0.0).is_err());
    }

    fn word_obj() -> (EmbeddingMatrix, EmbeddingMatrix) {
        let w = EmbeddingMatrix::from_rows(
            [
                ("dog".to_string(), vec![2.0, 0.0]),
                ("run".to_string(), vec![1.0, 1.0]),
            ],
            2,
            Provenance::WordSpace,
        )
        .unwrap();
        let o = EmbeddingMatrix::from_rows(
            [
                ("dog".to_string(), vec![0.0, 2.0]),
                ("leash".to_string(), vec![3.0, 3.0]),
            ],
            2,
            Provenance::ObjectProjected,
        )
        .unwrap();
        (w, o)
    }

    #[test]
    fn compose_endpoints_and_midpoint() {
        let (w, o) = word_obj();
        let c = compose_vwor(&w, &o, 1.0).unwrap();
        assert_eq!(c.embedding.vector("dog").unwrap(), &[2.0, 0.0]);
        let c = compose_vwor(&w, &o, 0.0).unwrap();
        assert_eq!(c.embedding.vector("dog").unwrap(), &[0.0, 2.0]);
        let c = compose_vwor(&w, &o, 0.5).unwrap();
        assert_eq!(c.embedding.vector("dog").unwrap(), &[1.0, 1.0]);
        assert_eq!(c.embedding.vector("run").unwrap(), &[1.0, 1.0]);
        assert_eq!(c.embedding.vector("leash").unwrap(), &[3.0, 3.0]);
        assert_eq!(
            c.membership,
            vec![
                Membership::Paired,
                Membership::WordOnly,
                Membership::ObjectOnly
            ]
        );
        assert_eq!(c.embedding.provenance, Provenance::VWor);
        assert!(compose_vwor(&w, &o, 1.5).is_err());
    }

    fn merge_fixture() -> (EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = DMatrix::from_fn(8, 3, |_, _| StandardNormal.sample(&mut rng));
        let vwor = emb("t", &base, Provenance::VWor);
        let q1 = random_orthogonal(3, &mut rng);
        let q2 = random_orthogonal(3, &mut rng);
        let voo = emb("t", &(base.rows(0, 4) * q1), Provenance::VOo);
        let mut vwo_rows: Vec<(String, Vec<f64>)> = (0..6)
            .map(|i| {
                (
                    format!("t{i}"),
                    (base.row(i) * &q2).iter().copied().collect(),
                )
            })
            .collect();
        vwo_rows.push(("only_wo".into(), vec![1.0, 2.0, 3.0]));
        let vwo = EmbeddingMatrix::from_rows(vwo_rows, 3, Provenance::VWo).unwrap();
        (voo, vwo, vwor)
    }

    #[test]
    fn merge_weights_and_degenerate_cases() {
        let (voo, vwo, vwor) = merge_fixture();
        let m = merge(&voo, &vwo, &vwor, [10.0, 10.0, 80.0]).unwrap();
        assert_eq!(m.weights, [0.1, 0.1, 0.8]);
        assert_eq!(m.embedding.meta.extra["weights"], "0.1,0.1,0.8");
        // v_oo and v_wo are exact rotations of v_wor, so alignment undoes them.
        for (t, v) in m.embedding.rows().take(8) {
            let w = vwor.vector(t).unwrap();
            assert!(v.iter().zip(w).all(|(a, b)| (a - b).abs() < 1e-9), "{t}");
        }
        assert!(m.embedding.contains("only_wo"));

        let m = merge(&voo, &vwo, &vwor, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.embedding.len(), vwor.len());
        for (t, v) in vwor.rows() {
            assert_eq!(m.embedding.vector(t).unwrap(), v);
        }

        let scaled = merge(&voo, &vwo, &vwor, [1.0, 1.0, 8.0]).unwrap();
        let m = merge(&voo, &vwo, &vwor, [10.0, 10.0, 80.0]).unwrap();
        assert_eq!(scaled.embedding, m.embedding);

        assert!(merge(&voo, &vwo, &vwor, [0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn merge_token_only_in_vwor_is_copied() {
        let (voo, vwo, vwor) = merge_fixture();
        // t6 and t7 exist only in v_wor.
        let m = merge(&voo, &vwo, &vwor, [3.0, 1.0, 0.7]).unwrap();
        assert_eq!(
            m.embedding.vector("t7").unwrap(),
            vwor.vector("t7").unwrap()
        );
    }

    #[test]
    fn merge_without_shared_tokens_fails() {
        let (_, vwo, vwor) = merge_fixture();
        let voo = emb("zz", &DMatrix::identity(3, 3), Provenance::VOo);
        assert!(matches!(
            merge(&voo, &vwo, &vwor, [1.0, 1.0, 8.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(merge(&voo, &vwo, &vwor, [0.0, 1.0, 8.0]).is_ok());
    }
}
