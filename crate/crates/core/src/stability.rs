//! Empirical check of the bounded-trajectory guarantee for contractive
//! adaptation operators.
//!
//! With `e^(k) = |z^(k) - z*|` for the operator's fixed point `z*` and
//! `delta^(k) = |c^(k) - z^(k)|`, the dynamics satisfy
//! `e^(k+1) <= rho e^(k) + (1 - alpha) delta^(k)` with
//! `rho = 1 - alpha + alpha L_D`. Taking `eps = max_k delta^(k)` and unrolling
//! gives `e^(k) <= rho^k e^(0) + (1 - alpha) eps / (1 - rho)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::atc::{run_observed, AtcConfig};
use crate::denoiser::DenoiserOperator;
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Slack allowed between the observed and theoretical curves.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub node: usize,
    pub alpha: f64,
    pub lipschitz: f64,
    pub contraction_factor: f64,
    pub epsilon_hat: f64,
    pub initial_error: f64,
    pub bound_curve: Vec<f64>,
    pub observed_curve: Vec<f64>,
    pub satisfied: bool,
}

/// `1 - alpha + alpha L_D`.
pub fn contraction_factor(alpha: f64, lipschitz: f64) -> f64 {
    1.0 - alpha + alpha * lipschitz
}

fn check_contraction(alpha: f64, lipschitz: f64) -> Result<()> {
    if !(lipschitz < 1.0) {
        return Err(Error::NotContractive { lipschitz });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Steady-state term `(1 - alpha) eps / (1 - rho)`.
pub fn steady_state_term(alpha: f64, lipschitz: f64, epsilon: f64) -> Result<f64> {
    check_contraction(alpha, lipschitz)?;
    let rho = contraction_factor(alpha, lipschitz);
    Ok((1.0 - alpha) * epsilon / (1.0 - rho))
}

/// `rho^k e0 + (1 - alpha) eps / (1 - rho)`.
pub fn theoretical_bound(alpha: f64, lipschitz: f64, epsilon: f64, e0: f64, k: usize) -> Result<f64> {
    let steady = steady_state_term(alpha, lipschitz, epsilon)?;
    let rho = contraction_factor(alpha, lipschitz);
    Ok(rho.powi(k as i32) * e0 + steady)
}

fn row_distance(a: ndarray::ArrayView1<'_, f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs the dynamics once and certifies every node in `nodes`.
///
/// `reference` is the stable state `z*`; it defaults to the operator's
/// closed-form fixed point and must be supplied for other operators.
pub fn verify_stability_nodes(
    g: &Graph,
    z0: &Array2<f64>,
    op: &DenoiserOperator,
    cfg: &AtcConfig,
    reference: Option<&[f64]>,
    nodes: &[usize],
) -> Result<Vec<StabilityCertificate>> {
    let lipschitz = op
        .declared_lipschitz
        .ok_or_else(|| Error::InvalidConfig("operator has no declared Lipschitz constant".into()))?;
    check_contraction(cfg.alpha, lipschitz)?;
    let z_star: Vec<f64> = match (reference, op.fixed_point()) {
        (Some(r), _) => r.to_vec(),
        (None, Some(fp)) => fp,
        (None, None) => {
            return Err(Error::InvalidConfig(
                "a reference state is required for operators without a known fixed point".into(),
            ))
        }
    };
    if z_star.len() != z0.ncols() {
        return Err(Error::Shape(format!(
            "reference state has length {}, latents have {}",
            z_star.len(),
            z0.ncols()
        )));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= g.num_nodes()) {
        return Err(Error::Shape(format!("node {bad} out of range")));
    }
    let mut observed: Vec<Vec<f64>> = nodes.iter().map(|&i| vec![row_distance(z0.row(i), &z_star)]).collect();
    let mut deltas: Vec<f64> = vec![0.0; nodes.len()];
    run_observed(g, z0, op, cfg, |step| {
        for (slot, &i) in nodes.iter().enumerate() {
            let delta = step
                .consensus
                .row(i)
                .iter()
                .zip(step.z.row(i).iter())
                .map(|(c, z)| (c - z).powi(2))
                .sum::<f64>()
                .sqrt();
            deltas[slot] = deltas[slot].max(delta);
            observed[slot].push(row_distance(step.z_next.row(i), &z_star));
        }
    })?;
    let rho = contraction_factor(cfg.alpha, lipschitz);
    nodes
        .iter()
        .enumerate()
        .map(|(slot, &node)| {
            let e0 = observed[slot][0];
            let epsilon_hat = deltas[slot];
            let bound_curve = (0..observed[slot].len())
                .map(|k| theoretical_bound(cfg.alpha, lipschitz, epsilon_hat, e0, k))
                .collect::<Result<Vec<f64>>>()?;
            let satisfied = observed[slot]
                .iter()
                .zip(&bound_curve)
                .all(|(o, b)| *o <= b + BOUND_TOLERANCE);
            Ok(StabilityCertificate {
                node,
                alpha: cfg.alpha,
                lipschitz,
                contraction_factor: rho,
                epsilon_hat,
                initial_error: e0,
                bound_curve,
                observed_curve: observed[slot].clone(),
                satisfied,
            })
        })
        .collect()
}

/// Certificate for a single node.
pub fn verify_stability(
    g: &Graph,
    z0: &Array2<f64>,
    op: &DenoiserOperator,
    cfg: &AtcConfig,
    reference: Option<&[f64]>,
    node: usize,
) -> Result<StabilityCertificate> {
    verify_stability_nodes(g, z0, op, cfg, reference, &[node]).map(|mut v| v.remove(0))
}
