//! Turning accumulated trajectory statistics into anomaly scores.
//!
//! The fused score is `r + (1 - w) + beta * conflict + lambda * energy`.
//! `r` and `energy` are per-iteration means, while `conflict` stays a raw sum
//! over all iterations, so its scale grows with `K`. Turn on
//! `normalize_signals` to z-score each term across nodes before fusing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::atc::{AtcState, TrustState};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityMode {
    /// Sum of incident trust divided by `N - 1`.
    #[default]
    PaperLiteral,
    /// Sum of incident trust divided by the degree.
    NeighborMean,
}

impl std::str::FromStr for ReliabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" | "paper-literal" | "literal" => Ok(ReliabilityMode::PaperLiteral),
            "neighbor_mean" | "neighbor-mean" => Ok(ReliabilityMode::NeighborMean),
            other => Err(Error::InvalidConfig(format!("unknown reliability mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReliabilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReliabilityMode::PaperLiteral => "paper_literal",
            ReliabilityMode::NeighborMean => "neighbor_mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub beta: f64,
    pub lambda: f64,
    pub reliability_mode: ReliabilityMode,
    pub normalize_signals: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            beta: 1.0,
            lambda: 1.0,
            reliability_mode: ReliabilityMode::PaperLiteral,
            normalize_signals: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite() && self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("beta and lambda must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub r: f64,
    pub w: f64,
    pub conflict: f64,
    pub energy: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub nodes: Vec<NodeScore>,
    pub config: ScoreConfig,
    pub iterations: usize,
    pub seed: Option<u64>,
}

impl ScoreReport {
    pub fn scores(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.score).collect()
    }
}

/// Per-node reliability from the final trust. Isolated nodes, and every node
/// of a single-node graph, get 0.
pub fn reliability_weights(trust: &TrustState, g: &Graph, mode: ReliabilityMode) -> Vec<f64> {
    let n = g.num_nodes();
    (0..n)
        .map(|i| {
            let deg = g.degree(i);
            if deg == 0 || n < 2 {
                return 0.0;
            }
            let total: f64 = g.neighbor_edges(i).iter().map(|&e| trust.values[e]).sum();
            match mode {
                ReliabilityMode::PaperLiteral => total / (n - 1) as f64,
                ReliabilityMode::NeighborMean => total / deg as f64,
            }
        })
        .collect()
}

/// Population z-scores; a constant signal maps to all zeros.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || values.iter().all(|&v| v == values[0]) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Fuses raw per-node signals. `r` and `energy` are already per-iteration means.
pub fn fuse_signals(
    r: &[f64],
    w: &[f64],
    conflict: &[f64],
    energy: &[f64],
    cfg: &ScoreConfig,
) -> Vec<f64> {
    let unreliability: Vec<f64> = w.iter().map(|w| 1.0 - w).collect();
    if cfg.normalize_signals {
        let (zr, zu, zc, ze) = (
            z_scores(r),
            z_scores(&unreliability),
            z_scores(conflict),
            z_scores(energy),
        );
        (0..r.len())
            .map(|i| zr[i] + zu[i] + cfg.beta * zc[i] + cfg.lambda * ze[i])
            .collect()
    } else {
        (0..r.len())
            .map(|i| r[i] + unreliability[i] + cfg.beta * conflict[i] + cfg.lambda * energy[i])
            .collect()
    }
}

/// Normalizes `r` and `energy` by `K` (not `conflict`) and fuses the signals.
pub fn fuse_scores(
    state: &AtcState,
    w: &[f64],
    cfg: &ScoreConfig,
    iterations: usize,
) -> Result<ScoreReport> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("iteration count must be positive".into()));
    }
    if w.len() != state.inconsistency.len() {
        return Err(Error::Shape(format!(
            "{} reliability weights for {} nodes",
            w.len(),
            state.inconsistency.len()
        )));
    }
    let k = iterations as f64;
    let r: Vec<f64> = state.inconsistency.iter().map(|v| v / k).collect();
    let energy: Vec<f64> = state.energy.iter().map(|v| v / k).collect();
    let scores = fuse_signals(&r, w, &state.conflict, &energy, cfg);
    let nodes = (0..r.len())
        .map(|i| NodeScore {
            r: r[i],
            w: w[i],
            conflict: state.conflict[i],
            energy: energy[i],
            score: scores[i],
        })
        .collect();
    Ok(ScoreReport {
        nodes,
        config: cfg.clone(),
        iterations,
        seed: None,
    })
}

/// Exact AUROC: `P(score_pos > score_neg) + P(tie) / 2`, via midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so midranks stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start + 1 ..= end, midrank (start + 1 + end) / 2.
        let twice_midrank = (start + 1 + end) as u128;
        let positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        twice_rank_sum += positives * twice_midrank;
        start = end;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // 2U = 2R - p(p + 1).
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

fn write_err(e: std::io::Error) -> Error {
    Error::io("writing scores", e)
}

/// Writes the score table: `node_id,r,w,conflict,energy,score[,label]`.
pub fn write_scores_csv(report: &ScoreReport, g: &Graph, out: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let labels = g.labels();
    let mut header = vec!["node_id", "r", "w", "conflict", "energy", "score"];
    if labels.is_some() {
        header.push("label");
    }
    wtr.write_record(&header)?;
    for (i, s) in report.nodes.iter().enumerate() {
        let id = g
            .node_ids()
            .map(|ids| ids[i].clone())
            .unwrap_or_else(|| i.to_string());
        let mut row = vec![
            id,
            s.r.to_string(),
            s.w.to_string(),
            s.conflict.to_string(),
            s.energy.to_string(),
            s.score.to_string(),
        ];
        if let Some(l) = labels {
            row.push(l[i].to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(write_err)?;
    Ok(())
}
