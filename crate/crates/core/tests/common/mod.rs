//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use opcal_core::{Dataset, OperationRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for j in 0..2 * n {
                        m[row][j] -= f * m[col][j];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn rbf(a: &[f64], b: &[f64], ell: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * ell * ell)).exp()
}

/// `(μ, σ)` of the zero-mean noise-free GP posterior via an explicit inverse.
pub fn dense_posterior(
    points: &[Vec<f64>],
    targets: &[f64],
    ell: f64,
    jitter: f64,
    query: &[f64],
) -> (f64, f64) {
    let n = points.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| rbf(&points[i], &points[j], ell) + if i == j { jitter } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = invert(&k);
    let ks: Vec<f64> = points.iter().map(|p| rbf(p, query, ell)).collect();
    let mut mean = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean += ks[i] * inv[i][j] * targets[j];
            quad += ks[i] * inv[i][j] * ks[j];
        }
    }
    (mean, (1.0 - quad).max(0.0).sqrt())
}

/// Weighted isotonic fit by the min-max formula over groups sorted by x:
/// `f_i = max_{j ≤ i} min_{k ≥ i} mean(j..=k)`. Returns `(x, f)` per distinct x.
pub fn isotonic_minmax(pairs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, f64, f64)> = Vec::new(); // x, weight, sum
    for (x, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == x => {
                g.1 += 1.0;
                g.2 += y;
            }
            _ => groups.push((x, 1.0, y)),
        }
    }
    let n = groups.len();
    (0..n)
        .map(|i| {
            let mut best = f64::NEG_INFINITY;
            for j in 0..=i {
                let mut inner = f64::INFINITY;
                for k in i..n {
                    let (w, s) = groups[j..=k]
                        .iter()
                        .fold((0.0, 0.0), |acc, g| (acc.0 + g.1, acc.1 + g.2));
                    inner = inner.min(s / w);
                }
                best = best.max(inner);
            }
            (groups[i].0, best)
        })
        .collect()
}

/// Random labeled dataset with Gaussian blobs as representations and
/// logits that are a noisy linear function of them.
pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, k: usize, d: usize) -> Dataset {
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let records = (0..n)
        .map(|i| {
            let y = rng.random_range(0..k);
            let z: Vec<f64> = centers[y]
                .iter()
                .map(|c| c + rng.random_range(-1.5..1.5))
                .collect();
            let logits: Vec<f64> = (0..k)
                .map(|j| {
                    let dist: f64 = z.iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    -0.5 * dist + rng.random_range(-1.0..1.0)
                })
                .collect();
            OperationRecord::new(i as u64, z, logits).with_label(y)
        })
        .collect();
    Dataset::new(records).unwrap()
}
