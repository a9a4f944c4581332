//! Independent oracles shared by the integration tests: dense adjacency,
//! scalar loops, no code from the library's hot paths.
#![allow(dead_code)]

use atcgad::Graph;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdos-Renyi graph with uniform features in [-2, 2).
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, p: f64) -> Graph {
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::new(x, edges, None).unwrap().0
}

pub fn dense_adjacency(g: &Graph) -> Vec<Vec<bool>> {
    let n = g.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for &(u, v) in g.edges() {
        a[u][v] = true;
        a[v][u] = true;
    }
    a
}

pub enum Op {
    Identity,
    Shrink { center: Vec<f64>, ratio: f64 },
    Affine { m: Vec<Vec<f64>>, b: Vec<f64> },
}

impl Op {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Op::Identity => z.to_vec(),
            Op::Shrink { center, ratio } => z.iter().zip(center).map(|(v, m)| m + ratio * (v - m)).collect(),
            Op::Affine { m, b } => (0..b.len())
                .map(|i| b[i] + (0..z.len()).map(|j| m[i][j] * z[j]).sum::<f64>())
                .collect(),
        }
    }
}

pub struct OracleResult {
    pub z: Vec<Vec<f64>>,
    pub trust: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub energy: Vec<f64>,
    pub conflict: Vec<f64>,
    pub sigma: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Naive adapt-then-combine: dense trust matrix, scalar loops.
/// `sigma = None` means the median edge distance at the first iteration.
pub fn naive_run(
    adj: &[Vec<bool>],
    z0: &[Vec<f64>],
    op: &Op,
    k_max: usize,
    alpha: f64,
    gamma: f64,
    sigma: Option<f64>,
) -> OracleResult {
    let n = z0.len();
    let d = z0[0].len();
    let mut z = z0.to_vec();
    let mut t = vec![vec![1.0; n]; n];
    let mut r = vec![0.0; n];
    let mut energy = vec![0.0; n];
    let mut conflict = vec![0.0; n];
    let mut s = sigma.unwrap_or(0.0);
    for k in 0..k_max {
        let psi: Vec<Vec<f64>> = z.iter().map(|row| op.apply(row)).collect();
        if k == 0 && sigma.is_none() {
            let mut ds = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if adj[i][j] {
                        ds.push(dist2(&psi[i], &psi[j]).sqrt());
                    }
                }
            }
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s = if ds.is_empty() {
                1.0
            } else if ds.len() % 2 == 1 {
                ds[ds.len() / 2]
            } else {
                (ds[ds.len() / 2 - 1] + ds[ds.len() / 2]) / 2.0
            };
            if s == 0.0 {
                s = 1.0;
            }
        }
        for i in 0..n {
            for j in 0..n {
                if adj[i][j] {
                    let tau = (-dist2(&psi[i], &psi[j]) / (2.0 * s * s)).exp();
                    t[i][j] = gamma * t[i][j] + (1.0 - gamma) * tau;
                }
            }
        }
        let mut next = vec![vec![0.0; d]; n];
        for i in 0..n {
            let mut c = vec![0.0; d];
            let mut total = 0.0;
            for j in 0..n {
                if adj[i][j] {
                    total += t[i][j];
                }
            }
            if total == 0.0 {
                c = psi[i].clone();
            } else {
                for j in 0..n {
                    if adj[i][j] {
                        for f in 0..d {
                            c[f] += t[i][j] / total * psi[j][f];
                        }
                    }
                }
            }
            let mut gap = 0.0;
            let mut tension = 0.0;
            let mut e = 0.0;
            for f in 0..d {
                next[i][f] = alpha * psi[i][f] + (1.0 - alpha) * c[f];
                gap += (z[i][f] - c[f]).powi(2);
                let dd = psi[i][f] - z[i][f];
                let dc = c[f] - z[i][f];
                tension += (dd - dc).powi(2);
                e += (next[i][f] - psi[i][f]).powi(2);
            }
            r[i] += gap.sqrt();
            conflict[i] += tension;
            energy[i] += e;
        }
        z = next;
    }
    OracleResult { z, trust: t, r, energy, conflict, sigma: s }
}

/// Pair-counting AUROC: P(score_pos > score_neg) + 0.5 P(tie).
pub fn pair_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (f, v) in row.iter().enumerate() {
            m = m.max((a[[i, f]] - v).abs());
        }
    }
    m
}

/// Trust planted anomalies end up with, relative to normal-normal edges.
pub fn trust_ratio(g: &Graph, trust: &[f64]) -> f64 {
    let labels = g.labels().unwrap();
    let (mut a_sum, mut a_n, mut n_sum, mut n_n) = (0.0, 0usize, 0.0, 0usize);
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if labels[u] == 1 || labels[v] == 1 {
            a_sum += trust[e];
            a_n += 1;
        } else {
            n_sum += trust[e];
            n_n += 1;
        }
    }
    (a_sum / a_n as f64) / (n_sum / n_n as f64)
}
