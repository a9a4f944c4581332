//! End-to-end runs: load or generate, encode, build the operator, iterate,
//! score. A [`RunManifest`] fully determines a run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::atc::{self, AtcConfig, AtcState, Bandwidth, Checkpoint};
use crate::denoiser::{default_ridge, fit_linear_denoiser, DenoiserOperator, NoiseSchedule};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{load_graph, Graph};
use crate::rng::{stream, sub_seed};
use crate::scoring::{self, ReliabilityMode, ScoreConfig, ScoreReport};
use crate::synth::{generate_sbm, inject_anomalies, AnomalyPlan};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSpec {
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: Option<PathBuf>,
    },
    Synthetic {
        n_per_block: usize,
        n_blocks: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectSpec {
    pub contextual_fraction: f64,
    pub structural_fraction: f64,
    pub contextual_shift: f64,
    pub contextual_inflation: f64,
}

impl Default for InjectSpec {
    fn default() -> Self {
        let plan = AnomalyPlan::new(0.0, 0.0, 0);
        InjectSpec {
            contextual_fraction: 0.0,
            structural_fraction: 0.0,
            contextual_shift: plan.contextual_shift,
            contextual_inflation: plan.contextual_inflation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterRule {
    /// Column mean of the initial latents.
    Mean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    Shrinkage {
        ratio: f64,
        center: CenterRule,
    },
    Linear {
        noise_level_t: usize,
        ridge: Option<f64>,
        /// Fit only on nodes labelled normal.
        exclude_anomalies: bool,
        schedule: NoiseSchedule,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub out_dir: PathBuf,
    pub trace: bool,
    pub checkpoint: bool,
    pub save_denoiser: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub input: InputSpec,
    pub inject: Option<InjectSpec>,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserSpec,
    pub atc: AtcConfig,
    pub score: ScoreConfig,
    pub outputs: OutputSpec,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The planted-anomaly benchmark: two SBM blocks of 50 nodes
/// (`p_in = 0.2`, `p_out = 0.01`, 8 features), 5% contextual anomalies shifted
/// by 5 within-cluster standard deviations, identity encoding, shrinkage
/// toward the latent mean with ratio 0.99, `alpha = 0.99`, `K = 50`,
/// `gamma = 0.9`, median bandwidth and z-scored fusion with
/// `beta = lambda = 1`.
///
/// The weak coupling is deliberate. With a contractive operator the joint
/// update contracts every state toward one common fixed point, so trust on
/// anomalous edges recovers once trajectories merge; it is still suppressed
/// at `K = 50` only while `alpha * ratio` stays close to 1.
pub fn benchmark_manifest(seed: u64) -> RunManifest {
    RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed,
        input: InputSpec::Synthetic {
            n_per_block: 50,
            n_blocks: 2,
            p_in: 0.2,
            p_out: 0.01,
            feature_dim: 8,
        },
        inject: Some(InjectSpec {
            contextual_fraction: 0.05,
            ..Default::default()
        }),
        encoder: EncoderConfig {
            num_layers: 0,
            latent_dim: 8,
            projection_seed: sub_seed(seed, stream::ENCODER),
            use_nonlinearity: true,
        },
        denoiser: DenoiserSpec::Shrinkage {
            ratio: 0.99,
            center: CenterRule::Mean,
        },
        atc: AtcConfig {
            iterations: 50,
            alpha: 0.99,
            gamma: 0.9,
            sigma: Bandwidth::Median,
            record_trace: false,
            kernel_on_latent: false,
        },
        score: ScoreConfig {
            beta: 1.0,
            lambda: 1.0,
            reliability_mode: ReliabilityMode::PaperLiteral,
            normalize_signals: true,
        },
        outputs: OutputSpec {
            out_dir: PathBuf::from("."),
            trace: false,
            checkpoint: false,
            save_denoiser: false,
        },
    }
}

/// An error tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub struct RunOutput {
    pub graph: Graph,
    pub z0: Array2<f64>,
    pub denoiser: DenoiserOperator,
    pub state: AtcState,
    pub report: ScoreReport,
    pub auroc: Option<f64>,
}

/// Column means of `z`.
pub fn latent_mean(z: &Array2<f64>) -> Vec<f64> {
    let n = z.nrows() as f64;
    (0..z.ncols())
        .map(|j| z.column(j).iter().sum::<f64>() / n)
        .collect()
}

pub fn build_graph(m: &RunManifest) -> Result<Graph> {
    match &m.input {
        InputSpec::Files {
            edges,
            features,
            labels,
        } => load_graph(edges, features, labels.as_deref()).map(|(g, _)| g),
        InputSpec::Synthetic {
            n_per_block,
            n_blocks,
            p_in,
            p_out,
            feature_dim,
        } => generate_sbm(
            *n_per_block,
            *n_blocks,
            *p_in,
            *p_out,
            *feature_dim,
            sub_seed(m.seed, stream::GRAPH),
        ),
    }
}

pub fn apply_injection(m: &RunManifest, g: Graph) -> Result<Graph> {
    match &m.inject {
        None => Ok(g),
        Some(spec) => {
            let plan = AnomalyPlan {
                contextual_fraction: spec.contextual_fraction,
                structural_fraction: spec.structural_fraction,
                seed: sub_seed(m.seed, stream::INJECT),
                contextual_shift: spec.contextual_shift,
                contextual_inflation: spec.contextual_inflation,
            };
            inject_anomalies(&g, &plan)
        }
    }
}

pub fn build_denoiser(m: &RunManifest, g: &Graph, z0: &Array2<f64>) -> Result<DenoiserOperator> {
    match &m.denoiser {
        DenoiserSpec::Identity => Ok(DenoiserOperator::identity()),
        DenoiserSpec::Shrinkage { ratio, center } => {
            let c = match center {
                CenterRule::Mean => latent_mean(z0),
                CenterRule::Zero => vec![0.0; z0.ncols()],
            };
            DenoiserOperator::shrinkage(c, *ratio)
        }
        DenoiserSpec::Linear {
            noise_level_t,
            ridge,
            exclude_anomalies,
            schedule,
        } => {
            let rows: Vec<usize> = match (exclude_anomalies, g.labels()) {
                (true, Some(l)) => (0..g.num_nodes()).filter(|&i| l[i] == 0).collect(),
                _ => (0..g.num_nodes()).collect(),
            };
            let clean = z0.select(Axis(0), &rows);
            let ridge = ridge.unwrap_or_else(|| default_ridge(clean.nrows()));
            fit_linear_denoiser(
                &clean,
                schedule,
                *noise_level_t,
                ridge,
                sub_seed(m.seed, stream::DENOISER),
            )
        }
        DenoiserSpec::File { path } => DenoiserOperator::load(path),
    }
}

/// Runs every stage in memory.
pub fn execute(m: &RunManifest) -> std::result::Result<RunOutput, StageError> {
    let g = build_graph(m).at("load")?;
    let g = apply_injection(m, g).at("inject")?;
    let z0 = encode(&g, &m.encoder).at("encode")?;
    let op = build_denoiser(m, &g, &z0).at("denoiser")?;
    if !op.is_contractive() {
        log::warn!(
            "{} operator is not contractive (L = {:?})",
            op.name(),
            op.declared_lipschitz
        );
    }
    let mut cfg = m.atc.clone();
    cfg.record_trace = m.outputs.trace;
    let state = atc::run(&g, &z0, &op, &cfg).at("dynamics")?;
    let w = scoring::reliability_weights(&state.trust, &g, m.score.reliability_mode);
    let mut report = scoring::fuse_scores(&state, &w, &m.score, cfg.iterations).at("score")?;
    report.seed = Some(m.seed);
    let auroc = match g.labels() {
        Some(l) if l.contains(&1) && l.contains(&0) => {
            Some(scoring::auroc(&report.scores(), l).at("score")?)
        }
        _ => None,
    };
    Ok(RunOutput {
        graph: g,
        z0,
        denoiser: op,
        state,
        report,
        auroc,
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub auroc: Option<f64>,
    pub n: usize,
    pub n_anomalies: usize,
    pub config: MetricsConfig,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsConfig {
    pub atc: AtcConfig,
    pub score: ScoreConfig,
    pub denoiser: String,
    pub lipschitz: Option<f64>,
    pub sigma_used: f64,
    pub seed: u64,
}

pub fn metrics(m: &RunManifest, out: &RunOutput) -> Metrics {
    Metrics {
        auroc: out.auroc,
        n: out.graph.num_nodes(),
        n_anomalies: out
            .graph
            .labels()
            .map_or(0, |l| l.iter().filter(|&&v| v == 1).count()),
        config: MetricsConfig {
            atc: m.atc.clone(),
            score: m.score.clone(),
            denoiser: out.denoiser.name().to_string(),
            lipschitz: out.denoiser.declared_lipschitz,
            sigma_used: out.state.sigma,
            seed: m.seed,
        },
    }
}

/// Writes `path` through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(format!("creating temporary file in {}", dir.display()), e))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(format!("syncing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
}

/// Writes every requested output of a finished run and returns their paths.
pub fn write_outputs(m: &RunManifest, out: &RunOutput) -> Result<Vec<PathBuf>> {
    let dir = &m.outputs.out_dir;
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))?;
    let mut written = Vec::new();

    let scores = dir.join("scores.csv");
    write_atomic(&scores, |w| scoring::write_scores_csv(&out.report, &out.graph, w))?;
    written.push(scores);

    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &metrics(m, out))?;
    written.push(metrics_path);

    if m.outputs.trace {
        if let Some(trace) = &out.state.trace {
            let path = dir.join("trace.jsonl");
            write_atomic(&path, |w| atc::write_trace_jsonl(trace, out.graph.node_ids(), w))?;
            written.push(path);
        }
    }
    if m.outputs.checkpoint {
        let path = dir.join("checkpoint.json");
        write_json(&path, &Checkpoint::from_state(&out.state, &out.graph, &m.atc))?;
        written.push(path);
    }
    if m.outputs.save_denoiser {
        let path = dir.join("denoiser.json");
        write_json(&path, &out.denoiser)?;
        written.push(path);
    }
    let manifest = dir.join("manifest.json");
    write_json(&manifest, m)?;
    written.push(manifest);
    Ok(written)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    write_json(path, value)
}
