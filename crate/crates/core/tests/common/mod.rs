//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain nested vectors and loops so that it shares
//! no code path with the library.

#![allow(dead_code)]

use std::collections::HashMap;

use colocate::corpus::DocumentRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller standard normal.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Dense {
    (0..m)
        .map(|_| (0..n).map(|_| gauss(rng)).collect())
        .collect()
}

/// Association value of one cell computed straight from the count table.
/// `measure` uses the library's names.
pub fn assoc_cell(
    table: &[Vec<u64>],
    w: usize,
    c: usize,
    measure: &str,
    k: f64,
    alpha: f64,
) -> f64 {
    let mut grand = 0.0;
    for row in table {
        for &n in row {
            grand += n as f64;
        }
    }
    let n_wc = table[w][c] as f64;
    match measure {
        "raw_count" => return n_wc,
        "normalized_count" => return n_wc / grand,
        _ => {}
    }
    let mut row_total = 0.0;
    for &n in &table[w] {
        row_total += n as f64;
    }
    let cols = table[0].len();
    let mut smoothed_sum = 0.0;
    let mut col_c = 0.0;
    for j in 0..cols {
        let mut col = 0.0;
        for row in table {
            col += row[j] as f64;
        }
        smoothed_sum += col.powf(alpha);
        if j == c {
            col_c = col;
        }
    }
    let p_wc = n_wc / grand;
    let p_w = row_total / grand;
    let p_c = col_c.powf(alpha) / smoothed_sum;
    let pmi = (p_wc / (p_w * p_c)).ln();
    match measure {
        "pmi" => pmi,
        "ppmi" => pmi.max(0.0),
        "sppmi_cds" => (pmi - k.ln()).max(0.0),
        other => panic!("unknown measure {other}"),
    }
}

fn vocab_index(tokens: &[String]) -> HashMap<&str, usize> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect()
}

/// Object–object counts: unordered pairs of distinct object types per image.
pub fn oracle_oo(docs: &[DocumentRecord], objects: &[String], multiplicity: bool) -> Vec<Vec<u64>> {
    let idx = vocab_index(objects);
    let n = objects.len();
    let mut out = vec![vec![0u64; n]; n];
    for doc in docs {
        let mut counts = vec![0u64; n];
        for o in &doc.objects {
            if let Some(&i) = idx.get(o.as_str()) {
                counts[i] += 1;
            }
        }
        for a in 0..n {
            for b in 0..n {
                if a != b && counts[a] > 0 && counts[b] > 0 {
                    out[a][b] += if multiplicity {
                        counts[a] * counts[b]
                    } else {
                        1
                    };
                }
            }
        }
    }
    out
}

/// Word–object counts: per caption, every (word type present, object type
/// present in the image) pair.
pub fn oracle_wo(docs: &[DocumentRecord], words: &[String], objects: &[String]) -> Vec<Vec<u64>> {
    let (wi, oi) = (vocab_index(words), vocab_index(objects));
    let mut out = vec![vec![0u64; objects.len()]; words.len()];
    for doc in docs {
        for caption in &doc.captions {
            for (w, wrow) in out.iter_mut().enumerate() {
                if !caption.iter().any(|t| wi.get(t.as_str()) == Some(&w)) {
                    continue;
                }
                for (o, cell) in wrow.iter_mut().enumerate() {
                    if doc.objects.iter().any(|t| oi.get(t.as_str()) == Some(&o)) {
                        *cell += 1;
                    }
                }
            }
        }
    }
    out
}

/// Word–word counts: ordered position pairs `p != q` with `|p − q| <= window`
/// (`None` = whole caption) holding distinct in-vocabulary types.
pub fn oracle_ww(
    docs: &[DocumentRecord],
    words: &[String],
    window: Option<usize>,
) -> Vec<Vec<u64>> {
    let idx = vocab_index(words);
    let n = words.len();
    let mut out = vec![vec![0u64; n]; n];
    for doc in docs {
        for caption in &doc.captions {
            for p in 0..caption.len() {
                for q in 0..caption.len() {
                    if p == q || window.is_some_and(|w| p.abs_diff(q) > w) {
                        continue;
                    }
                    let (Some(&a), Some(&b)) =
                        (idx.get(caption[p].as_str()), idx.get(caption[q].as_str()))
                    else {
                        continue;
                    };
                    if a != b {
                        out[a][b] += 1;
                    }
                }
            }
        }
    }
    out
}

/// Singular values by one-sided Jacobi rotations, sorted non-increasing.
pub fn jacobi_singular_values(a: &Dense) -> Vec<f64> {
    let m = a.len();
    let n = a[0].len();
    // Work on the orientation with at least as many rows as columns.
    let mut cols: Vec<Vec<f64>> = if m >= n {
        (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
    } else {
        a.clone()
    };
    let k = cols.len();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in cols[p].iter().zip(&cols[q]) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = cols.split_at_mut(q);
                for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Haar-ish random orthogonal matrix by modified Gram–Schmidt on a Gaussian
/// matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Dense {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for l in 0..k {
            for j in 0..n {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

pub fn row_times(x: &[f64], q: &Dense) -> Vec<f64> {
    let mut out = vec![0.0; q[0].len()];
    for (xi, row) in x.iter().zip(q) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
    out
}

pub fn frobenius_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Random documents over small token inventories `o0..`, `w0..` including a
/// few tokens outside any vocabulary built with a positive min count.
pub fn random_docs(rng: &mut ChaCha8Rng, max_docs: usize) -> Vec<DocumentRecord> {
    let n = rng.random_range(1..=max_docs);
    (0..n)
        .map(|i| {
            let objects = (0..rng.random_range(0..6))
                .map(|_| format!("o{}", rng.random_range(0..6)))
                .collect();
            let captions = (0..rng.random_range(0..4))
                .map(|_| {
                    (0..rng.random_range(0..10))
                        .map(|_| format!("w{}", rng.random_range(0..9)))
                        .collect()
                })
                .collect();
            DocumentRecord {
                image_id: format!("img{i}"),
                objects,
                captions,
            }
        })
        .collect()
}

/// Peak resident set size of this process in bytes, if the platform reports
/// it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
