//! Adapt-then-combine dynamics with temporal trust memory.
//!
//! One iteration `k` reads only the snapshot `z^(k)` and performs, for every
//! node at once:
//!
//! 1. adapt: `psi_i = D(z_i)`;
//! 2. trust: `T_ij <- gamma T_ij + (1 - gamma) exp(-|psi_i - psi_j|^2 / (2 sigma^2))`
//!    for every undirected edge;
//! 3. combine: `c_i = sum_j (T_ij / sum_m T_im) psi_j` and
//!    `z_i' = alpha psi_i + (1 - alpha) c_i`;
//! 4. accumulate: `r_i += |z_i - c_i|`, `conflict_i += |Delta_D - Delta_C|^2`
//!    with `Delta_D = psi_i - z_i`, `Delta_C = c_i - z_i`, and
//!    `energy_i += |z_i' - psi_i|^2`.
//!
//! An isolated node has no consensus; its `c_i` falls back to `psi_i`.
//!
//! Per-node work runs on the rayon pool, but every node reduces its neighbors
//! in CSR order, so results are bitwise independent of the worker count.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserOperator;
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Kernel bandwidth of the instantaneous alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median edge distance between adapted states at the first iteration,
    /// then frozen.
    Median,
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("median") {
            return Ok(Bandwidth::Median);
        }
        s.parse::<f64>()
            .map(Bandwidth::Fixed)
            .map_err(|_| Error::InvalidConfig(format!("sigma must be a number or \"median\", got {s:?}")))
    }
}

impl std::fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bandwidth::Fixed(v) => write!(f, "{v}"),
            Bandwidth::Median => f.write_str("median"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtcConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: Bandwidth,
    #[serde(default)]
    pub record_trace: bool,
    /// Compute the alignment kernel on `z` instead of `psi`. Together with
    /// `gamma = 0` this gives memoryless weights on the raw latents.
    #[serde(default)]
    pub kernel_on_latent: bool,
}

impl Default for AtcConfig {
    fn default() -> Self {
        AtcConfig {
            iterations: 20,
            alpha: 0.7,
            gamma: 0.9,
            sigma: Bandwidth::Median,
            record_trace: false,
            kernel_on_latent: false,
        }
    }
}

impl AtcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if let Bandwidth::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Trust memory, one value per undirected edge (indexed like `Graph::edges`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub values: Vec<f64>,
    /// Number of updates applied since initialization.
    pub iteration: usize,
}

impl TrustState {
    pub fn initial(g: &Graph) -> Self {
        TrustState {
            values: vec![1.0; g.num_edges()],
            iteration: 0,
        }
    }

    /// Trust on edge `(i, j)`, if it exists.
    pub fn get(&self, g: &Graph, i: usize, j: usize) -> Option<f64> {
        let pos = g.neighbors(i).binary_search(&j).ok()?;
        Some(self.values[g.neighbor_edges(i)[pos]])
    }
}

/// Per-iteration arrays recorded when tracing is on.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSnapshot {
    pub k: usize,
    pub z: Array2<f64>,
    pub psi: Array2<f64>,
    pub consensus: Array2<f64>,
    pub step_conflict: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtcState {
    /// `z^(k)`.
    pub z: Array2<f64>,
    /// Adapted states of the last completed iteration.
    pub psi: Array2<f64>,
    /// Consensus of the last completed iteration.
    pub consensus: Array2<f64>,
    pub trust: TrustState,
    /// Running sum of `|z_i - c_i|`.
    pub inconsistency: Vec<f64>,
    /// Running sum of `|z_i^(k+1) - psi_i^(k)|^2`.
    pub energy: Vec<f64>,
    /// Running sum of the per-step conflict `|Delta_D - Delta_C|^2`.
    pub conflict: Vec<f64>,
    /// Completed iterations.
    pub iteration: usize,
    /// Bandwidth actually used (resolved from the median rule if requested).
    pub sigma: f64,
    pub trace: Option<Vec<IterationSnapshot>>,
}

impl AtcState {
    pub fn new(g: &Graph, z0: Array2<f64>, sigma: f64) -> Self {
        let n = z0.nrows();
        AtcState {
            psi: z0.clone(),
            consensus: z0.clone(),
            z: z0,
            trust: TrustState::initial(g),
            inconsistency: vec![0.0; n],
            energy: vec![0.0; n],
            conflict: vec![0.0; n],
            iteration: 0,
            sigma,
            trace: None,
        }
    }
}

/// What an observer sees after each iteration `k`.
pub struct StepView<'a> {
    pub k: usize,
    pub z: &'a Array2<f64>,
    pub psi: &'a Array2<f64>,
    pub consensus: &'a Array2<f64>,
    pub z_next: &'a Array2<f64>,
    pub step_conflict: &'a [f64],
    pub trust: &'a TrustState,
}

/// `psi_i = D(z_i)` for every row.
pub fn adapt_step(z: &Array2<f64>, op: &DenoiserOperator) -> Result<Array2<f64>> {
    op.check_dim(z.ncols())?;
    let mut psi = Array2::zeros(z.raw_dim());
    Zip::from(psi.axis_iter_mut(Axis(0)))
        .and(z.axis_iter(Axis(0)))
        .par_for_each(|mut out, row| {
            op.apply_into(
                row.as_slice().expect("rows of a standard-layout array are contiguous"),
                out.as_slice_mut().expect("rows of a standard-layout array are contiguous"),
            );
        });
    Ok(psi)
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian alignment `exp(-|a - b|^2 / (2 sigma^2))`, in `(0, 1]`.
pub fn instantaneous_alignment(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, sigma: f64) -> f64 {
    (-squared_distance(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Median over edges of `|a_i - a_j|`; `None` without edges.
pub fn median_edge_distance(g: &Graph, states: &Array2<f64>) -> Option<f64> {
    if g.num_edges() == 0 {
        return None;
    }
    let mut d: Vec<f64> = g
        .edges()
        .par_iter()
        .map(|&(u, v)| squared_distance(states.row(u), states.row(v)).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Some(if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    })
}

/// Resolves the bandwidth, falling back to 1 when the median rule yields no
/// usable value (no edges, or all edge distances zero).
pub fn resolve_bandwidth(sigma: Bandwidth, g: &Graph, states: &Array2<f64>) -> f64 {
    match sigma {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => match median_edge_distance(g, states) {
            Some(m) if m > 0.0 && m.is_finite() => m,
            _ => {
                log::warn!("median bandwidth unavailable (no edges or zero distances); using 1.0");
                1.0
            }
        },
    }
}

/// `T_ij <- gamma T_ij + (1 - gamma) tau_ij` on every edge.
pub fn trust_update(
    g: &Graph,
    trust: &mut TrustState,
    states: &Array2<f64>,
    gamma: f64,
    sigma: f64,
) {
    trust
        .values
        .par_iter_mut()
        .zip(g.edges().par_iter())
        .for_each(|(t, &(u, v))| {
            let tau = instantaneous_alignment(states.row(u), states.row(v), sigma);
            *t = gamma * *t + (1.0 - gamma) * tau;
        });
    trust.iteration += 1;
}

/// Normalized weights `T_ij / sum_m T_im` aligned with `g.neighbors(i)`.
pub fn normalized_weights(g: &Graph, trust: &TrustState, i: usize) -> Vec<f64> {
    let edges = g.neighbor_edges(i);
    let total: f64 = edges.iter().map(|&e| trust.values[e]).sum();
    edges.iter().map(|&e| trust.values[e] / total).collect()
}

/// Trust-weighted consensus of adapted states; isolated nodes get `psi_i`.
pub fn consensus(g: &Graph, trust: &TrustState, psi: &Array2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros(psi.raw_dim());
    Zip::indexed(c.axis_iter_mut(Axis(0))).par_for_each(|i, mut row| {
        let edges = g.neighbor_edges(i);
        if edges.is_empty() {
            row.assign(&psi.row(i));
            return;
        }
        let total: f64 = edges.iter().map(|&e| trust.values[e]).sum();
        for (&j, &e) in g.neighbors(i).iter().zip(edges) {
            row.scaled_add(trust.values[e] / total, &psi.row(j));
        }
    });
    c
}

/// Combine step: returns `(c, z_next)` with `z_next_i = alpha psi_i + (1 - alpha) c_i`.
pub fn combine_step(
    g: &Graph,
    trust: &TrustState,
    psi: &Array2<f64>,
    alpha: f64,
) -> (Array2<f64>, Array2<f64>) {
    let c = consensus(g, trust, psi);
    let mut z_next = Array2::zeros(psi.raw_dim());
    Zip::from(&mut z_next)
        .and(psi)
        .and(&c)
        .par_for_each(|out, &p, &ci| *out = alpha * p + (1.0 - alpha) * ci);
    (c, z_next)
}

/// The one-line form `alpha D(z_i) + (1 - alpha) c_i`.
pub fn collapsed_form(
    z_i: ArrayView1<'_, f64>,
    c_i: ArrayView1<'_, f64>,
    op: &DenoiserOperator,
    alpha: f64,
) -> Result<Array1<f64>> {
    if z_i.len() != c_i.len() {
        return Err(Error::Shape("state and consensus differ in length".into()));
    }
    let adapted = op.apply(z_i)?;
    Ok(&adapted * alpha + &c_i.mapv(|v| (1.0 - alpha) * v))
}

/// Adds one iteration's signals to the accumulators and returns the per-step
/// conflict of every node.
pub fn accumulate_signals(
    state: &mut AtcState,
    z: &Array2<f64>,
    psi: &Array2<f64>,
    c: &Array2<f64>,
    z_next: &Array2<f64>,
) -> Vec<f64> {
    let per_node: Vec<(f64, f64, f64)> = (0..z.nrows())
        .into_par_iter()
        .map(|i| {
            let (zi, pi, ci, ni) = (z.row(i), psi.row(i), c.row(i), z_next.row(i));
            let mut inconsistency = 0.0;
            let mut conflict = 0.0;
            let mut energy = 0.0;
            for f in 0..zi.len() {
                let gap = zi[f] - ci[f];
                inconsistency += gap * gap;
                let delta_d = pi[f] - zi[f];
                let delta_c = ci[f] - zi[f];
                conflict += (delta_d - delta_c) * (delta_d - delta_c);
                let residual = ni[f] - pi[f];
                energy += residual * residual;
            }
            (inconsistency.sqrt(), conflict, energy)
        })
        .collect();
    let mut step_conflict = Vec::with_capacity(per_node.len());
    for (i, (r, t, e)) in per_node.into_iter().enumerate() {
        state.inconsistency[i] += r;
        state.conflict[i] += t;
        state.energy[i] += e;
        step_conflict.push(t);
    }
    step_conflict
}

fn first_non_finite(m: &Array2<f64>) -> Option<usize> {
    m.axis_iter(Axis(0))
        .into_par_iter()
        .position_first(|row| row.iter().any(|v| !v.is_finite()))
}

fn check_inputs(g: &Graph, z0: &Array2<f64>, op: &DenoiserOperator, cfg: &AtcConfig) -> Result<()> {
    cfg.validate()?;
    if z0.nrows() != g.num_nodes() {
        return Err(Error::Shape(format!(
            "{} latent rows for {} nodes",
            z0.nrows(),
            g.num_nodes()
        )));
    }
    if z0.ncols() == 0 {
        return Err(Error::Shape("latent dimension must be at least 1".into()));
    }
    op.check_dim(z0.ncols())?;
    if let Some(node) = first_non_finite(z0) {
        return Err(Error::Divergence { iteration: 0, node });
    }
    Ok(())
}

/// Runs `cfg.iterations` synchronous iterations from `z0`.
pub fn run(g: &Graph, z0: &Array2<f64>, op: &DenoiserOperator, cfg: &AtcConfig) -> Result<AtcState> {
    run_observed(g, z0, op, cfg, |_| {})
}

/// [`run`] with a callback invoked after each iteration.
pub fn run_observed(
    g: &Graph,
    z0: &Array2<f64>,
    op: &DenoiserOperator,
    cfg: &AtcConfig,
    mut observer: impl FnMut(&StepView<'_>),
) -> Result<AtcState> {
    check_inputs(g, z0, op, cfg)?;
    let z0 = z0.as_standard_layout().into_owned();
    let mut state = AtcState::new(g, z0, 0.0);
    if cfg.record_trace {
        state.trace = Some(Vec::with_capacity(cfg.iterations));
    }
    for k in 0..cfg.iterations {
        let z = std::mem::take(&mut state.z);
        let psi = adapt_step(&z, op)?;
        if let Some(node) = first_non_finite(&psi) {
            return Err(Error::Divergence { iteration: k, node });
        }
        let kernel_states = if cfg.kernel_on_latent { &z } else { &psi };
        if k == 0 {
            state.sigma = resolve_bandwidth(cfg.sigma, g, kernel_states);
        }
        trust_update(g, &mut state.trust, kernel_states, cfg.gamma, state.sigma);
        let (c, z_next) = combine_step(g, &state.trust, &psi, cfg.alpha);
        if let Some(node) = first_non_finite(&z_next) {
            return Err(Error::Divergence { iteration: k, node });
        }
        let step_conflict = accumulate_signals(&mut state, &z, &psi, &c, &z_next);
        observer(&StepView {
            k,
            z: &z,
            psi: &psi,
            consensus: &c,
            z_next: &z_next,
            step_conflict: &step_conflict,
            trust: &state.trust,
        });
        if let Some(trace) = state.trace.as_mut() {
            trace.push(IterationSnapshot {
                k,
                z: z.clone(),
                psi: psi.clone(),
                consensus: c.clone(),
                step_conflict,
            });
        }
        state.z = z_next;
        state.psi = psi;
        state.consensus = c;
        state.iteration = k + 1;
    }
    Ok(state)
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    k: usize,
    node: usize,
    z: Vec<f64>,
    psi: Vec<f64>,
    c: Vec<f64>,
    conflict: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    node_id: Option<&'a str>,
}

/// Writes one JSON object per `(iteration, node)` line.
pub fn write_trace_jsonl(
    trace: &[IterationSnapshot],
    node_ids: Option<&[String]>,
    mut out: impl Write,
) -> Result<()> {
    for snap in trace {
        for node in 0..snap.z.nrows() {
            let record = TraceRecord {
                k: snap.k,
                node,
                z: snap.z.row(node).to_vec(),
                psi: snap.psi.row(node).to_vec(),
                c: snap.consensus.row(node).to_vec(),
                conflict: snap.step_conflict[node],
                node_id: node_ids.map(|ids| ids[node].as_str()),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("writing trace", e))?;
        }
    }
    Ok(())
}

/// Serializable final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: AtcConfig,
    pub sigma: f64,
    pub iterations: usize,
    pub z: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub trust: Vec<f64>,
    pub inconsistency: Vec<f64>,
    pub energy: Vec<f64>,
    pub conflict: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &AtcState, g: &Graph, cfg: &AtcConfig) -> Self {
        Checkpoint {
            config: cfg.clone(),
            sigma: state.sigma,
            iterations: state.iteration,
            z: state.z.rows().into_iter().map(|r| r.to_vec()).collect(),
            edges: g.edges().to_vec(),
            trust: state.trust.values.clone(),
            inconsistency: state.inconsistency.clone(),
            energy: state.energy.clone(),
            conflict: state.conflict.clone(),
        }
    }
}
