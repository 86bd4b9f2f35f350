//! Independent oracles and instance generators shared by the integration
//! tests. Everything here is deliberately naive.

#![allow(dead_code)]

pub mod criteria;

use dream_ood::embeddings::{EmbeddingMatrix, PrototypeBank};
use dream_ood::nn::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> EmbeddingMatrix {
    let data = (0..n * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    EmbeddingMatrix::new(n, dim, data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    gaussian_rows(rng, n, dim, 1.0).normalized().unwrap()
}

/// Bank built from random tokens with norms in [0.5, 3).
pub fn random_bank(rng: &mut ChaCha8Rng, classes: usize, m: usize) -> PrototypeBank {
    let mut tokens = EmbeddingMatrix::empty(m);
    for _ in 0..classes {
        let dir = unit_rows(rng, 1, m);
        let norm = rng.random_range(0.5..3.0);
        let row: Vec<f64> = dir.row(0).iter().map(|x| x * norm).collect();
        tokens.push_row(&row).unwrap();
    }
    PrototypeBank::from_tokens_unnamed(&tokens).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-th smallest distance from `q` to the rows of `set`, skipping row
/// `skip`, by sorting the full distance list.
pub fn brute_knn(q: &[f64], set: &EmbeddingMatrix, k: usize, skip: Option<usize>) -> f64 {
    let mut d: Vec<f64> = (0..set.rows())
        .filter(|&i| Some(i) != skip)
        .map(|i| dist(q, set.row(i)))
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

/// Index and distance of the candidate with the extreme k-NN distance,
/// lowest index on ties.
pub fn brute_filter(candidates: &EmbeddingMatrix, set: &EmbeddingMatrix, k: usize, largest: bool) -> (usize, f64) {
    let table: Vec<f64> = candidates.iter_rows().map(|c| brute_knn(c, set, k, None)).collect();
    let mut best = 0;
    for i in 1..table.len() {
        let better = if largest { table[i] > table[best] } else { table[i] < table[best] };
        if better {
            best = i;
        }
    }
    (best, table[best])
}

/// Members ordered by self-excluded k-NN distance, lowest index on ties.
pub fn brute_anchor_order(set: &EmbeddingMatrix, k: usize, largest: bool) -> Vec<usize> {
    let d: Vec<f64> = (0..set.rows()).map(|i| brute_knn(set.row(i), set, k, Some(i))).collect();
    let mut idx: Vec<usize> = (0..set.rows()).collect();
    idx.sort_by(|&a, &b| {
        let o = if largest { d[b].total_cmp(&d[a]) } else { d[a].total_cmp(&d[b]) };
        o.then(a.cmp(&b))
    });
    idx
}

/// `P(id > ood) + ½ P(id = ood)` over all pairs.
pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice_wins: u64 = 0;
    for &a in id {
        for &b in ood {
            twice_wins += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice_wins as f64 / (2.0 * id.len() as f64 * ood.len() as f64)
}

/// FPR at the largest threshold that keeps at least 95% of ID scores,
/// found by trying every observed score as a threshold.
pub fn sweep_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut best_tau = f64::NEG_INFINITY;
    for &tau in id.iter().chain(ood) {
        let kept = id.iter().filter(|&&s| s >= tau).count();
        if 100 * kept >= 95 * id.len() && tau > best_tau {
            best_tau = tau;
        }
    }
    ood.iter().filter(|&&s| s >= best_tau).count() as f64 / ood.len() as f64
}

/// Score multisets drawn from a small grid so that ties are common.
pub fn tie_heavy(rng: &mut ChaCha8Rng, n: usize, levels: u32, shift: i32) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random_range(0..levels) as i32 + shift) as f64 * 0.25)
        .collect()
}

pub fn continuous(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
    (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Central difference `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every
/// coordinate.
pub fn central_differences(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            p[i] = theta[i] + h;
            let up = f(&p);
            p[i] = theta[i] - h;
            let down = f(&p);
            p[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor on the denominator, so coordinates whose
/// gradient is essentially zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Smallest |pre-activation| over the hidden layers of `mlp` for input `x`.
/// Finite differences are only meaningful away from ReLU kinks.
pub fn min_hidden_preactivation(mlp: &Mlp, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut closest = f64::INFINITY;
    for l in 0..mlp.num_layers() - 1 {
        let (w, b) = mlp.layer(l);
        let a: Vec<f64> = (0..b.len())
            .map(|o| b[o] + w[o * h.len()..(o + 1) * h.len()].iter().zip(&h).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect();
        closest = a.iter().fold(closest, |c, v| c.min(v.abs()));
        h = a.into_iter().map(|v| v.max(0.0)).collect();
    }
    closest
}
