//! Truncated SVD by randomized subspace iteration, eigenvalue weighting, and
//! the association-matrix → embedding step.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assoc::AssocMatrix;
use crate::cooc::MatrixKind;
use crate::embedding::{EmbeddingMatrix, EmbeddingMeta, Provenance};
use crate::error::{Error, Result};

/// Something that can be multiplied against a dense block from either side.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A · x`
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Aᵀ · x`
    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    fn frobenius_sq(&self) -> f64;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }

    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(x)
    }

    fn frobenius_sq(&self) -> f64 {
        self.norm_squared()
    }
}

// Work on transposed blocks so each row of `x` is a contiguous column.
fn sparse_apply(
    entries: &[(u32, u32, f64)],
    out_rows: usize,
    x: &DMatrix<f64>,
    transpose: bool,
) -> DMatrix<f64> {
    let l = x.ncols();
    let xt = x.transpose();
    let src = xt.as_slice();
    let mut yt = DMatrix::<f64>::zeros(l, out_rows);
    let dst = yt.as_mut_slice();
    for &(r, c, v) in entries {
        let (to, from) = if transpose { (c, r) } else { (r, c) };
        let (to, from) = (to as usize * l, from as usize * l);
        for (y, x) in dst[to..to + l].iter_mut().zip(&src[from..from + l]) {
            *y += v * x;
        }
    }
    yt.transpose()
}

impl LinearOperator for AssocMatrix {
    fn nrows(&self) -> usize {
        self.rows()
    }

    fn ncols(&self) -> usize {
        self.cols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        sparse_apply(self.entries(), self.rows(), x, false)
    }

    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        sparse_apply(self.entries(), self.cols(), x, true)
    }

    fn frobenius_sq(&self) -> f64 {
        self.entries().iter().map(|e| e.2 * e.2).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvdOptions {
    /// Extra sketch columns beyond the target rank.
    pub oversample: usize,
    /// Minimum number of power (subspace) iterations.
    pub power_iters: usize,
    /// Iteration cap while waiting for the leading singular values to settle.
    pub max_iters: usize,
    /// Relative change in the leading singular values accepted as converged.
    pub tol: f64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            oversample: 10,
            power_iters: 4,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// Rank-d factors `U_d Σ_d V_dᵀ` with σ sorted non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
    pub iterations: usize,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Dense SVD with singular values sorted in decreasing order and the
/// largest-magnitude entry of every left singular vector made positive.
pub(crate) fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let u = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| v_t.row(i).transpose())
            .collect::<Vec<_>>(),
    );
    let s = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    let (mut u, mut v) = (u, v);
    fix_signs(&mut u, &mut v);
    (u, s, v)
}

/// Flip each (u_i, v_i) pair so that u_i's largest-magnitude component is
/// positive (first index wins ties).
fn fix_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..u.ncols() {
        let col = u.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
}

/// Rank-`d` truncated SVD by randomized subspace iteration with a seeded
/// Gaussian sketch.
pub fn truncated_svd<A: LinearOperator + ?Sized>(
    a: &A,
    d: usize,
    seed: u64,
    opts: &SvdOptions,
) -> Result<TruncatedSvd> {
    let (m, n) = (a.nrows(), a.ncols());
    let full = m.min(n);
    if d == 0 || d > full {
        return Err(Error::InvalidParam(format!(
            "rank {d} outside 1..={full} for a {m}x{n} matrix"
        )));
    }
    if a.frobenius_sq() == 0.0 {
        return Err(Error::Degenerate("matrix has no nonzero entries".into()));
    }
    let l = (d + opts.oversample).min(full);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(a.apply(&omega));

    // Ritz estimates of the leading singular values from the small Gram
    // matrix (QᵀA)(QᵀA)ᵀ, used only to decide when to stop iterating.
    let ritz = |q: &DMatrix<f64>| -> DVector<f64> {
        let bt = a.apply_t(q);
        let mut ev: Vec<f64> = bt
            .tr_mul(&bt)
            .symmetric_eigenvalues()
            .iter()
            .map(|e| e.max(0.0).sqrt())
            .collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        DVector::from_iterator(d, ev.into_iter().take(d))
    };
    let change = |prev: &DVector<f64>, cur: &DVector<f64>| {
        (prev - cur).amax() / cur[0].max(f64::MIN_POSITIVE)
    };

    let mut iterations = 0;
    if l < full {
        let mut prev: Option<DVector<f64>> = None;
        loop {
            if iterations >= opts.power_iters {
                let cur = ritz(&q);
                if let Some(p) = &prev {
                    let delta = change(p, &cur);
                    if delta <= opts.tol {
                        break;
                    }
                    if iterations >= opts.max_iters {
                        return Err(Error::NotConverged {
                            iterations,
                            residual: delta,
                        });
                    }
                } else if iterations >= opts.max_iters {
                    return Err(Error::NotConverged {
                        iterations,
                        residual: f64::INFINITY,
                    });
                }
                prev = Some(cur);
            }
            let z = orthonormalize(a.apply_t(&q));
            q = orthonormalize(a.apply(&z));
            iterations += 1;
        }
    }

    // B = Qᵀ A, factored through its transpose Aᵀ Q = V_b S U_bᵀ.
    let (v, s, ub) = sorted_svd(&a.apply_t(&q));
    let mut u = (&q * ub).columns(0, d).into_owned();
    let mut v = v.columns(0, d).into_owned();
    fix_signs(&mut u, &mut v);
    Ok(TruncatedSvd {
        u,
        sigma: s.rows(0, d).into_owned(),
        v,
        iterations,
    })
}

/// How the context factor is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContextScaling {
    /// `C = V_d Σ_d^p`
    #[default]
    Symmetric,
    /// `C = V_d`
    Unweighted,
}

/// `W = U_d Σ_d^p` and `C` per `context`.
pub fn eigenweight(
    svd: &TruncatedSvd,
    p: f64,
    context: ContextScaling,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let weights: Vec<f64> = svd.sigma.iter().map(|s| s.powf(p)).collect();
    let mut w = svd.u.clone();
    for (j, s) in weights.iter().enumerate() {
        w.column_mut(j).scale_mut(*s);
    }
    let mut c = svd.v.clone();
    if context == ContextScaling::Symmetric {
        for (j, s) in weights.iter().enumerate() {
            c.column_mut(j).scale_mut(*s);
        }
    }
    (w, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedParams {
    pub dim: usize,
    /// Eigenvalue-weighting exponent.
    pub p: f64,
    pub seed: u64,
    pub svd: SvdOptions,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams {
            dim: 300,
            p: 0.5,
            seed: 42,
            svd: SvdOptions::default(),
        }
    }
}

pub fn provenance_for(kind: MatrixKind) -> Provenance {
    match kind {
        MatrixKind::Oo => Provenance::VOo,
        MatrixKind::Wo => Provenance::VWo,
        MatrixKind::Ww => Provenance::WordSpace,
    }
}

/// Factor an association matrix and return the weighted left factor rows,
/// one per row token.
pub fn embed(
    a: &AssocMatrix,
    row_tokens: &[String],
    params: &EmbedParams,
) -> Result<EmbeddingMatrix> {
    if row_tokens.len() != a.rows() {
        return Err(Error::Shape(format!(
            "{} row tokens for a matrix with {} rows",
            row_tokens.len(),
            a.rows()
        )));
    }
    if !(0.0..=1.0).contains(&params.p) {
        return Err(Error::InvalidParam(format!(
            "p must lie in [0, 1], got {}",
            params.p
        )));
    }
    let svd = truncated_svd(a, params.dim, params.seed, &params.svd)?;
    let (w, _) = eigenweight(&svd, params.p, ContextScaling::Symmetric);
    let d = params.dim;
    let mut data = Vec::with_capacity(w.nrows() * d);
    for i in 0..w.nrows() {
        data.extend(w.row(i).iter());
    }
    let ap = a.params();
    let meta = EmbeddingMeta {
        measure: Some(ap.measure),
        k: Some(ap.k),
        alpha: Some(ap.alpha),
        p: Some(params.p),
        seed: Some(params.seed),
        ..Default::default()
    };
    Ok(
        EmbeddingMatrix::new(row_tokens.to_vec(), d, data, provenance_for(a.kind()))?
            .with_meta(meta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc::{associate, AssocParams, Measure};
    use crate::cooc::CoocMatrix;

    #[test]
    fn rank_one_exact() {
        let u = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let a = &u * v.transpose();
        let svd = truncated_svd(&a, 1, 1, &SvdOptions::default()).unwrap();
        assert!((svd.sigma[0] - 1.0).abs() < 1e-12);
        assert!((svd.reconstruct() - &a).norm() <= 1e-8);
    }

    #[test]
    fn diagonal_spectrum() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let svd = truncated_svd(&a, 2, 7, &SvdOptions::default()).unwrap();
        assert!((svd.sigma[0] - 3.0).abs() < 1e-12);
        assert!((svd.sigma[1] - 2.0).abs() < 1e-12);
        // Sign convention: largest component of each u column is positive.
        for j in 0..2 {
            let col = svd.u.column(j);
            let best = col.iamax();
            assert!(col[best] > 0.0);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let a = DMatrix::from_element(3, 2, 1.0);
        assert!(truncated_svd(&a, 0, 0, &SvdOptions::default()).is_err());
        assert!(truncated_svd(&a, 3, 0, &SvdOptions::default()).is_err());
        let z = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(
            truncated_svd(&z, 1, 0, &SvdOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        // Large sketch deficit on a flat spectrum with an iteration budget of zero.
        let a = DMatrix::from_fn(40, 40, |i, j| {
            ((i * 7 + j * 13) % 11) as f64 + (i == j) as u8 as f64
        });
        let opts = SvdOptions {
            oversample: 0,
            power_iters: 0,
            max_iters: 0,
            tol: 1e-15,
        };
        assert!(matches!(
            truncated_svd(&a, 5, 3, &opts),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn eigenweight_identities() {
        let a = DMatrix::from_fn(6, 5, |i, j| ((i + 1) * (j + 2)) as f64 % 7.0);
        let svd = truncated_svd(&a, 3, 0, &SvdOptions::default()).unwrap();
        let (w, c) = eigenweight(&svd, 0.5, ContextScaling::Symmetric);
        assert!((&w * c.transpose() - svd.reconstruct()).amax() <= 1e-10);
        let (w0, _) = eigenweight(&svd, 0.0, ContextScaling::Symmetric);
        assert_eq!(w0, svd.u);
        let (w1, c1) = eigenweight(&svd, 1.0, ContextScaling::Unweighted);
        assert_eq!(c1, svd.v);
        assert!((&w1 * c1.transpose() - svd.reconstruct()).amax() <= 1e-10);
    }

    #[test]
    fn eigenweight_scales_columns() {
        let svd = TruncatedSvd {
            u: DMatrix::identity(2, 2),
            sigma: DVector::from_vec(vec![4.0, 1.0]),
            v: DMatrix::identity(2, 2),
            iterations: 0,
        };
        let (w, _) = eigenweight(&svd, 0.5, ContextScaling::Symmetric);
        assert_eq!(
            w,
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))
        );
    }

    fn small_ww() -> AssocMatrix {
        let cells = [
            (0, 1, 3),
            (1, 0, 3),
            (0, 2, 1),
            (2, 0, 1),
            (1, 2, 2),
            (2, 1, 2),
            (2, 3, 5),
            (3, 2, 5),
        ];
        let m = CoocMatrix::from_cells(MatrixKind::Ww, 4, 4, true, cells).unwrap();
        associate(
            &m,
            AssocParams {
                measure: Measure::Ppmi,
                k: 1.0,
                alpha: 0.75,
            },
        )
        .unwrap()
    }

    #[test]
    fn embed_bookkeeping_and_determinism() {
        let a = small_ww();
        let tokens: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let params = EmbedParams {
            dim: 2,
            ..Default::default()
        };
        let e1 = embed(&a, &tokens, &params).unwrap();
        let e2 = embed(&a, &tokens, &params).unwrap();
        assert_eq!(e1.provenance, Provenance::WordSpace);
        assert_eq!(e1.len(), 4);
        assert_eq!(e1.dim(), 2);
        assert_eq!(e1.as_slice(), e2.as_slice());
        assert_eq!(e1.meta.p, Some(0.5));
        assert!(embed(&a, &tokens[..3], &params).is_err());
    }

    #[test]
    fn sparse_operator_matches_dense() {
        let a = small_ww();
        let dense = DMatrix::from_fn(4, 4, |i, j| a.get(i, j));
        let x = DMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.5);
        assert!((a.apply(&x) - &dense * &x).amax() < 1e-14);
        assert!((a.apply_t(&x) - dense.transpose() * &x).amax() < 1e-14);
    }
}
