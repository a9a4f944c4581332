//! Contractive adaptation operators used by the adapt step.
//!
//! An operator maps a latent vector toward the manifold of normal data. Three
//! kinds exist: the identity (non-contractive, ablation only), an analytic
//! shrinkage toward a center, and an affine map fitted by ridge regression
//! from noised latents back to clean ones.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DenoiserKind {
    Identity,
    Shrinkage {
        center: Vec<f64>,
        ratio: f64,
    },
    LinearTrained {
        /// Row-major `d_z x d_z` matrix.
        matrix: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserOperator {
    #[serde(flatten)]
    pub kind: DenoiserKind,
    pub declared_lipschitz: Option<f64>,
}

impl DenoiserOperator {
    pub fn identity() -> Self {
        DenoiserOperator {
            kind: DenoiserKind::Identity,
            declared_lipschitz: Some(1.0),
        }
    }

    /// `z -> center + ratio * (z - center)`, requires `0 <= ratio < 1`.
    pub fn shrinkage(center: Vec<f64>, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidConfig(format!(
                "shrinkage ratio must lie in [0, 1), got {ratio}"
            )));
        }
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("shrinkage center must be finite and non-empty".into()));
        }
        Ok(DenoiserOperator {
            kind: DenoiserKind::Shrinkage { center, ratio },
            declared_lipschitz: Some(ratio),
        })
    }

    /// `z -> matrix * z + bias`; the declared constant is the spectral norm.
    pub fn linear(matrix: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let d = bias.len();
        if d == 0 || matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "linear denoiser needs a {d}x{d} matrix"
            )));
        }
        let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
        let lipschitz = spectral_norm(&m);
        Ok(DenoiserOperator {
            kind: DenoiserKind::LinearTrained { matrix, bias },
            declared_lipschitz: Some(lipschitz),
        })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DenoiserKind::Identity => "identity",
            DenoiserKind::Shrinkage { .. } => "shrinkage",
            DenoiserKind::LinearTrained { .. } => "linear_trained",
        }
    }

    /// Input dimension, when the operator constrains it.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            DenoiserKind::Identity => None,
            DenoiserKind::Shrinkage { center, .. } => Some(center.len()),
            DenoiserKind::LinearTrained { bias, .. } => Some(bias.len()),
        }
    }

    pub fn is_contractive(&self) -> bool {
        self.declared_lipschitz.is_some_and(|l| l < 1.0)
    }

    /// The fixed point, when known in closed form (shrinkage only).
    pub fn fixed_point(&self) -> Option<Vec<f64>> {
        match &self.kind {
            DenoiserKind::Shrinkage { center, .. } => Some(center.clone()),
            _ => None,
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(expected) if expected != d => Err(Error::Shape(format!(
                "denoiser expects dimension {expected}, got {d}"
            ))),
            _ => Ok(()),
        }
    }

    /// Writes `D(z)` into `out`. Both slices must have the operator's dimension.
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.kind {
            DenoiserKind::Identity => out.copy_from_slice(z),
            DenoiserKind::Shrinkage { center, ratio } => {
                for ((o, &x), &m) in out.iter_mut().zip(z).zip(center) {
                    *o = m + ratio * (x - m);
                }
            }
            DenoiserKind::LinearTrained { matrix, bias } => {
                for ((o, row), &b) in out.iter_mut().zip(matrix).zip(bias) {
                    let mut acc = 0.0;
                    for (&a, &x) in row.iter().zip(z) {
                        acc += a * x;
                    }
                    *o = acc + b;
                }
            }
        }
    }

    pub fn apply(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(z.len())?;
        let input = z.to_vec();
        let mut out = vec![0.0; input.len()];
        self.apply_into(&input, &mut out);
        Ok(Array1::from(out))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let op: DenoiserOperator = serde_json::from_str(text)?;
        op.validate()?;
        Ok(op)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading denoiser {}", path.display()), e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            DenoiserKind::Identity => Ok(()),
            DenoiserKind::Shrinkage { center, ratio } => {
                Self::shrinkage(center.clone(), *ratio).map(|_| ())
            }
            DenoiserKind::LinearTrained { matrix, bias } => {
                Self::linear(matrix.clone(), bias.clone()).map(|_| ())
            }
        }
    }
}

/// Linearly spaced forward-noising schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(NoiseSchedule { betas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `prod_{s <= t} (1 - beta_s)`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.betas[..=t].iter().map(|b| 1.0 - b).product()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(100, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

/// Default ridge strength for `n` training rows.
pub fn default_ridge(n: usize) -> f64 {
    1e-3 * n as f64
}

/// Fits an affine denoiser by ridge regression from noised to clean latents.
///
/// Each clean row `z` is noised once in closed form,
/// `z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps`, and `(M, b)` minimize
/// `sum |M z_t + b - z|^2 + ridge |M|_F^2` (the bias is not penalized).
pub fn fit_linear_denoiser(
    clean: &Array2<f64>,
    schedule: &NoiseSchedule,
    noise_level_t: usize,
    ridge: f64,
    seed: u64,
) -> Result<DenoiserOperator> {
    let (n, d) = clean.dim();
    if n <= d {
        return Err(Error::Shape(format!(
            "need more rows than dimensions to fit, got {n}x{d}"
        )));
    }
    if noise_level_t >= schedule.steps() {
        return Err(Error::InvalidConfig(format!(
            "noise level {noise_level_t} outside schedule of {} steps",
            schedule.steps()
        )));
    }
    if !(ridge > 0.0) {
        return Err(Error::InvalidConfig("ridge must be positive".into()));
    }
    let abar = schedule.alpha_bar(noise_level_t);
    let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut rng = rng_from_seed(seed);
    let mut noisy = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            noisy[(i, j)] = signal * clean[[i, j]] + noise * eps;
        }
    }
    let target = DMatrix::from_fn(n, d, |i, j| clean[[i, j]]);
    let x_mean = noisy.row_mean();
    let y_mean = target.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| noisy[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(n, d, |i, j| target[(i, j)] - y_mean[j]);
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * ridge;
    let rhs = xc.transpose() * &yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?;
    // Solves gram * M^T = rhs.
    let mt = chol.solve(&rhs);
    let m = mt.transpose();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("ridge solution is not finite".into()));
    }
    let b: DVector<f64> = y_mean.transpose() - &m * x_mean.transpose();
    let matrix = (0..d).map(|i| (0..d).map(|j| m[(i, j)]).collect()).collect();
    DenoiserOperator::linear(matrix, b.iter().copied().collect())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Empirical Lipschitz constant: the largest `|D(u) - D(v)| / |u - v|` over
/// sampled pairs.
///
/// The first half of the probes draws `u` uniformly from the ball of the given
/// radius around the origin and `v = u + radius * g` for a Gaussian
/// direction `g`. The second half perturbs the best difference direction found
/// so far with a shrinking step, keeping improvements.
pub fn estimate_lipschitz(
    op: &DenoiserOperator,
    dim: usize,
    probe_count: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if probe_count < 2 {
        return Err(Error::InvalidConfig("need at least two probes".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig("probe radius must be positive".into()));
    }
    op.check_dim(dim)?;
    let mut rng = rng_from_seed(seed);
    let mut du = vec![0.0; dim];
    let mut dv = vec![0.0; dim];
    let mut quotient = |u: &[f64], v: &[f64]| -> Option<f64> {
        let den = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if den == 0.0 {
            return None;
        }
        op.apply_into(u, &mut du);
        op.apply_into(v, &mut dv);
        let num = du.iter().zip(&dv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        Some(num / den)
    };
    let gaussian = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    };
    let mut best = 0.0f64;
    let mut best_pair: Option<(Vec<f64>, Vec<f64>)> = None;
    let random_phase = probe_count.div_ceil(2);
    for _ in 0..random_phase {
        let dir = gaussian(&mut rng);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        let u: Vec<f64> = dir.iter().map(|x| r * x / norm).collect();
        let step = gaussian(&mut rng);
        let v: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a + radius * s).collect();
        if let Some(q) = quotient(&u, &v) {
            if q > best {
                best = q;
                best_pair = Some((u, v));
            }
        }
    }
    let mut scale = 0.5;
    for _ in random_phase..probe_count {
        let Some((u, v)) = best_pair.clone() else { break };
        let diff_norm = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let kick = gaussian(&mut rng);
        let v2: Vec<f64> = v
            .iter()
            .zip(&kick)
            .map(|(b, k)| b + scale * diff_norm * k / (dim as f64).sqrt())
            .collect();
        match quotient(&u, &v2) {
            Some(q) if q > best => {
                best = q;
                best_pair = Some((u, v2));
            }
            _ => scale = (scale * 0.995).max(1e-3),
        }
    }
    Ok(best)
}
