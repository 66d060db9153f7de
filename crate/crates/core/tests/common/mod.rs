//! Independent reference implementations used as test oracles. Each one is
//! written the slow, obvious way and shares no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `f32` rows in `[-scale, scale)`.
pub fn random_rows(r: &mut ChaCha8Rng, n: usize, dim: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| r.random_range(-scale..scale)).collect()).collect()
}

pub fn flat(rows: &[Vec<f32>]) -> Vec<f32> {
    rows.iter().flatten().copied().collect()
}

/// Pooled population covariance by explicit double loop over entries.
pub fn naive_covariance(rows: &[Vec<f32>], labels: &[u32], classes: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dim = rows[0].len();
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &y) in rows.iter().zip(labels) {
        counts[y as usize] += 1;
        for j in 0..dim {
            means[y as usize][j] += x[j] as f64;
        }
    }
    for c in 0..classes {
        for j in 0..dim {
            means[c][j] /= counts[c] as f64;
        }
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for a in 0..dim {
        for b in 0..dim {
            let mut s = 0.0;
            for (x, &y) in rows.iter().zip(labels) {
                let m = &means[y as usize];
                s += (x[a] as f64 - m[a]) * (x[b] as f64 - m[b]);
            }
            cov[a][b] = s / rows.len() as f64;
        }
    }
    (means, cov)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
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
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `max_c -(s - mu_c)^T inv (s - mu_c)` with an explicit inverse.
pub fn dense_mahalanobis(s: &[f32], means: &[Vec<f64>], inv: &[Vec<f64>]) -> f64 {
    means
        .iter()
        .map(|mu| {
            let d: Vec<f64> = s.iter().zip(mu).map(|(&x, m)| x as f64 - m).collect();
            let mut q = 0.0;
            for i in 0..d.len() {
                for j in 0..d.len() {
                    q += d[i] * inv[i][j] * d[j];
                }
            }
            -q
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// AUROC as the fraction of (id, ood) pairs ordered correctly, ties worth half.
pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// FPR at the largest threshold, among all observed scores, whose ID
/// acceptance reaches `num/den`. Integer arithmetic avoids any rounding in
/// the coverage condition.
pub fn sweep_fpr(id: &[f64], ood: &[f64], num: usize, den: usize) -> (f64, f64) {
    let mut cands: Vec<f64> = id.iter().chain(ood).copied().collect();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    for g in cands {
        let accepted = id.iter().filter(|&&s| s >= g).count();
        if accepted * den >= num * id.len() {
            let fp = ood.iter().filter(|&&s| s >= g).count();
            return (g, fp as f64 / ood.len() as f64);
        }
    }
    unreachable!("the smallest score accepts every ID point")
}

/// Mean over the ID batch of `-log softmax_y`, plus `lambda` times the mean
/// over the OE batch of `-(1/C) sum_k log softmax_k`, computed with plain
/// exponentials (only safe for moderate logits).
pub fn naive_total_loss(
    w: &[Vec<f64>],
    b: &[f64],
    id_rows: &[Vec<f32>],
    labels: &[u32],
    oe_rows: &[Vec<f32>],
    lambda: f64,
) -> f64 {
    let logits = |x: &[f32]| -> Vec<f64> {
        w.iter()
            .zip(b)
            .map(|(wk, bk)| wk.iter().zip(x).map(|(a, &v)| a * v as f64).sum::<f64>() + bk)
            .collect()
    };
    let log_probs = |z: &[f64]| -> Vec<f64> {
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter().map(|v| (v.exp() / denom).ln()).collect()
    };
    let mut ce = 0.0;
    for (x, &y) in id_rows.iter().zip(labels) {
        ce -= log_probs(&logits(x))[y as usize];
    }
    let ce = if id_rows.is_empty() { 0.0 } else { ce / id_rows.len() as f64 };
    let mut oe = 0.0;
    for x in oe_rows {
        let lp = log_probs(&logits(x));
        oe -= lp.iter().sum::<f64>() / lp.len() as f64;
    }
    let oe = if oe_rows.is_empty() { 0.0 } else { oe / oe_rows.len() as f64 };
    ce + lambda * oe
}

/// Cosine similarity computed in f64 from scratch.
pub fn cosine(a: &[f32], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, y)| x as f64 * y).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    dot / (na * nb)
}
