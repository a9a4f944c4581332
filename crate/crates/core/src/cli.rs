//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage and I/O errors, 1 for everything
//! else. Worker count comes from `ATCGAD_WORKERS` (default: all cores).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::atc::{AtcConfig, Bandwidth};
use crate::denoiser::NoiseSchedule;
use crate::encoder::EncoderConfig;
use crate::error::Error;
use crate::pipeline::{
    self, benchmark_manifest, CenterRule, DenoiserSpec, InjectSpec, InputSpec, OutputSpec,
    RunManifest, StageError, TOOL_VERSION,
};
use crate::rng::{stream, sub_seed};
use crate::scoring::{ReliabilityMode, ScoreConfig};
use crate::stability::{self, StabilityCertificate};

pub const WORKERS_ENV: &str = "ATCGAD_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "atcgad", version, about = "Graph anomaly scoring with trust-weighted consensus dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every node of a graph.
    Run(RunCmd),
    /// Check the bounded-trajectory guarantee on a run.
    VerifyStability(VerifyCmd),
    /// Grid search over hyperparameters on the planted-anomaly benchmark.
    Sweep(SweepCmd),
}

#[derive(Debug, Args)]
struct RunCmd {
    #[command(flatten)]
    opts: RunOpts,
    /// Rerun a manifest written by a previous run; other run options are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write per-iteration trust to trace.jsonl.
    #[arg(long)]
    trace: bool,
    /// Write the final state to checkpoint.json.
    #[arg(long)]
    checkpoint: bool,
    /// Write the operator to denoiser.json.
    #[arg(long)]
    save_denoiser: bool,
}

#[derive(Debug, Args)]
struct VerifyCmd {
    #[command(flatten)]
    opts: RunOpts,
    /// Certify only this node (default: every normal node).
    #[arg(long)]
    node: Option<usize>,
    #[arg(long, default_value = "certificate.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sigma: Vec<Bandwidth>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    beta: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambda: Vec<f64>,
    #[arg(long = "K", value_delimiter = ',', num_args = 1..)]
    k: Vec<usize>,
    /// Seeds per grid point, starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct RunOpts {
    /// Number of iterations.
    #[arg(long = "K", default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Kernel bandwidth: a positive number or "median".
    #[arg(long, default_value = "median")]
    sigma: Bandwidth,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Synthetic input, e.g. `sbm:50x2` (nodes per block x blocks).
    #[arg(long, conflicts_with_all = ["edges", "features"])]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    /// Planted anomalies, e.g. `contextual:0.05,structural:0.02`.
    #[arg(long)]
    inject: Option<String>,

    #[arg(long, requires = "features")]
    edges: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,

    /// Propagation layers of the encoder; 0 keeps the raw features.
    #[arg(long, default_value_t = 0)]
    layers: usize,
    /// Latent dimension; defaults to the feature dimension.
    #[arg(long)]
    latent_dim: Option<usize>,

    #[arg(long, value_parser = ["identity", "shrinkage", "linear", "file"], default_value = "shrinkage")]
    denoiser: String,
    /// Shrinkage ratio toward the latent mean.
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 10)]
    noise_level_t: usize,
    #[arg(long)]
    ridge: Option<f64>,
    /// Fit the linear operator on label-0 nodes only.
    #[arg(long)]
    fit_exclude_anomalies: bool,
    #[arg(long, required_if_eq("denoiser", "file"))]
    denoiser_file: Option<PathBuf>,

    #[arg(long, value_parser = ["paper_literal", "neighbor_mean"], default_value = "paper_literal")]
    reliability_mode: String,
    #[arg(long)]
    normalize_signals: bool,
    /// No trust memory: gamma = 0 with the kernel on raw latents.
    #[arg(long)]
    memoryless: bool,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure { code: exit_code(&e.source), message: e.to_string() }
    }
}

fn at(stage: &'static str) -> impl Fn(Error) -> Failure {
    move |source| StageError { stage, source }.into()
}

fn parse_synthetic(spec: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::usage(format!("--synthetic expects sbm:<nodes>x<blocks>, got {spec:?}"));
    let rest = spec.strip_prefix("sbm:").ok_or_else(bad)?;
    let (n, b) = rest.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_inject(spec: &str) -> Result<InjectSpec, Failure> {
    let mut out = InjectSpec::default();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Failure::usage(format!("--inject expects kind:fraction pairs, got {part:?}"));
        let (kind, value) = part.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "contextual" => out.contextual_fraction = value,
            "structural" => out.structural_fraction = value,
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

impl RunOpts {
    fn manifest(&self, outputs: OutputSpec) -> Result<RunManifest, Failure> {
        let input = match (&self.synthetic, &self.edges, &self.features) {
            (Some(spec), _, _) => {
                let (n_per_block, n_blocks) = parse_synthetic(spec)?;
                InputSpec::Synthetic {
                    n_per_block,
                    n_blocks,
                    p_in: self.p_in,
                    p_out: self.p_out,
                    feature_dim: self.feature_dim,
                }
            }
            (None, Some(edges), Some(features)) => InputSpec::Files {
                edges: edges.clone(),
                features: features.clone(),
                labels: self.labels.clone(),
            },
            _ => return Err(Failure::usage("either --synthetic or both --edges and --features are required")),
        };
        let inject = self.inject.as_deref().map(parse_inject).transpose()?;
        let feature_dim = match &input {
            InputSpec::Synthetic { feature_dim, .. } => Some(*feature_dim),
            InputSpec::Files { .. } => None,
        };
        let latent_dim = self.latent_dim.or(feature_dim).unwrap_or(16);
        let denoiser = match self.denoiser.as_str() {
            "identity" => DenoiserSpec::Identity,
            "shrinkage" => DenoiserSpec::Shrinkage { ratio: self.rho, center: CenterRule::Mean },
            "linear" => DenoiserSpec::Linear {
                noise_level_t: self.noise_level_t,
                ridge: self.ridge,
                exclude_anomalies: self.fit_exclude_anomalies,
                schedule: NoiseSchedule::default(),
            },
            _ => DenoiserSpec::File {
                path: self.denoiser_file.clone().ok_or_else(|| Failure::usage("--denoiser file needs --denoiser-file"))?,
            },
        };
        let (gamma, kernel_on_latent) = if self.memoryless { (0.0, true) } else { (self.gamma, false) };
        Ok(RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            seed: self.seed,
            input,
            inject,
            encoder: EncoderConfig {
                num_layers: self.layers,
                latent_dim,
                projection_seed: sub_seed(self.seed, stream::ENCODER),
                use_nonlinearity: true,
            },
            denoiser,
            atc: AtcConfig {
                iterations: self.k,
                alpha: self.alpha,
                gamma,
                sigma: self.sigma,
                record_trace: outputs.trace,
                kernel_on_latent,
            },
            score: ScoreConfig {
                beta: self.beta,
                lambda: self.lambda,
                reliability_mode: if self.reliability_mode == "neighbor_mean" {
                    ReliabilityMode::NeighborMean
                } else {
                    ReliabilityMode::PaperLiteral
                },
                normalize_signals: self.normalize_signals,
            },
            outputs,
        })
    }
}

fn validate(m: &RunManifest) -> Result<(), Failure> {
    m.atc.validate().map_err(|e| Failure::usage(e.to_string()))?;
    m.score.validate().map_err(|e| Failure::usage(e.to_string()))
}

fn cmd_run(cmd: RunCmd) -> Result<(), Failure> {
    let m = match &cmd.manifest {
        Some(path) => {
            let mut m = RunManifest::load(path).map_err(at("load"))?;
            if m.tool_version != TOOL_VERSION {
                log::warn!("manifest written by version {}, running {}", m.tool_version, TOOL_VERSION);
            }
            if let Some(dir) = &cmd.out_dir {
                m.outputs.out_dir = dir.clone();
            }
            m
        }
        None => cmd.opts.manifest(OutputSpec {
            out_dir: cmd.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
            trace: cmd.trace,
            checkpoint: cmd.checkpoint,
            save_denoiser: cmd.save_denoiser,
        })?,
    };
    validate(&m)?;
    let out = pipeline::execute(&m)?;
    let written = pipeline::write_outputs(&m, &out).map_err(at("write"))?;
    for p in &written {
        log::info!("wrote {}", p.display());
    }
    match out.auroc {
        Some(a) => println!("auroc {a:.6}"),
        None => println!("auroc n/a (no labels with both classes)"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    contraction_factor: f64,
    epsilon_hat: f64,
    satisfied: bool,
    nodes: &'a [StabilityCertificate],
}

fn cmd_verify(cmd: VerifyCmd) -> Result<(), Failure> {
    let m = cmd.opts.manifest(OutputSpec {
        out_dir: PathBuf::from("."),
        trace: false,
        checkpoint: false,
        save_denoiser: false,
    })?;
    validate(&m)?;
    let g = pipeline::build_graph(&m).map_err(at("load"))?;
    let g = pipeline::apply_injection(&m, g).map_err(at("inject"))?;
    let z0 = crate::encoder::encode(&g, &m.encoder).map_err(at("encode"))?;
    let op = pipeline::build_denoiser(&m, &g, &z0).map_err(at("denoiser"))?;
    let nodes: Vec<usize> = match (cmd.node, g.labels()) {
        (Some(i), _) => vec![i],
        (None, Some(l)) => (0..g.num_nodes()).filter(|&i| l[i] == 0).collect(),
        (None, None) => (0..g.num_nodes()).collect(),
    };
    // Affine operators have a fixed point even when not in closed form here.
    let reference = match op.fixed_point() {
        Some(_) => None,
        None => linear_fixed_point(&op),
    };
    let certs = stability::verify_stability_nodes(&g, &z0, &op, &m.atc, reference.as_deref(), &nodes)
        .map_err(at("stability"))?;
    let file = CertificateFile {
        contraction_factor: stability::contraction_factor(m.atc.alpha, op.declared_lipschitz.unwrap_or(f64::NAN)),
        epsilon_hat: certs.iter().map(|c| c.epsilon_hat).fold(0.0, f64::max),
        satisfied: certs.iter().all(|c| c.satisfied),
        nodes: &certs,
    };
    pipeline::write_json_file(&cmd.out, &file).map_err(at("write"))?;
    println!("contraction_factor {}", file.contraction_factor);
    println!("epsilon_hat {}", file.epsilon_hat);
    println!("satisfied {}", file.satisfied);
    if file.satisfied {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "stability bound violated".into() })
    }
}

/// Solves `z = M z + b` for a linear operator.
fn linear_fixed_point(op: &crate::denoiser::DenoiserOperator) -> Option<Vec<f64>> {
    let crate::denoiser::DenoiserKind::LinearTrained { matrix, bias } = &op.kind else {
        return None;
    };
    let d = bias.len();
    let a = nalgebra::DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } - matrix[i][j]);
    a.lu().solve(&nalgebra::DVector::from_column_slice(bias)).map(|v| v.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridPoint {
    alpha: f64,
    gamma: f64,
    sigma: Bandwidth,
    beta: f64,
    lambda: f64,
    k: usize,
}

fn or_default<T: Clone>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

fn grid(cmd: &SweepCmd, base: &RunManifest) -> Vec<GridPoint> {
    let mut points = Vec::new();
    for &alpha in &or_default(&cmd.alpha, base.atc.alpha) {
        for &gamma in &or_default(&cmd.gamma, base.atc.gamma) {
            for &sigma in &or_default(&cmd.sigma, base.atc.sigma) {
                for &beta in &or_default(&cmd.beta, base.score.beta) {
                    for &lambda in &or_default(&cmd.lambda, base.score.lambda) {
                        for &k in &or_default(&cmd.k, base.atc.iterations) {
                            points.push(GridPoint { alpha, gamma, sigma, beta, lambda, k });
                        }
                    }
                }
            }
        }
    }
    points
}

fn cmd_sweep(cmd: SweepCmd) -> Result<(), Failure> {
    let empty = cmd.alpha.is_empty()
        && cmd.gamma.is_empty()
        && cmd.sigma.is_empty()
        && cmd.beta.is_empty()
        && cmd.lambda.is_empty()
        && cmd.k.is_empty();
    if empty {
        return Err(Failure::usage("empty grid: give at least one of --alpha, --gamma, --sigma, --beta, --lambda, --K"));
    }
    if cmd.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let points = grid(&cmd, &benchmark_manifest(cmd.seed));
    let seeds: Vec<u64> = (0..cmd.seeds).map(|s| cmd.seed + s).collect();
    let manifest = |p: &GridPoint, seed: u64| {
        let mut m = benchmark_manifest(seed);
        m.atc.alpha = p.alpha;
        m.atc.gamma = p.gamma;
        m.atc.sigma = p.sigma;
        m.atc.iterations = p.k;
        m.score.beta = p.beta;
        m.score.lambda = p.lambda;
        m
    };
    for p in &points {
        validate(&manifest(p, cmd.seed))?;
    }
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let aurocs = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let out = pipeline::execute(&manifest(&points[i], seed))?;
            out.auroc.ok_or_else(|| StageError {
                stage: "score",
                source: Error::UndefinedMetric("benchmark run produced no AUROC".into()),
            })
        })
        .collect::<Result<Vec<f64>, StageError>>()?;

    let path = cmd.out.clone();
    pipeline::write_atomic(&path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["alpha", "gamma", "sigma", "beta", "lambda", "K", "seeds", "auroc_mean", "auroc_min", "auroc_max"])?;
        for (i, p) in points.iter().enumerate() {
            let a = &aurocs[i * seeds.len()..(i + 1) * seeds.len()];
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let min = a.iter().copied().fold(f64::INFINITY, f64::min);
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            csv.write_record([
                p.alpha.to_string(),
                p.gamma.to_string(),
                p.sigma.to_string(),
                p.beta.to_string(),
                p.lambda.to_string(),
                p.k.to_string(),
                seeds.len().to_string(),
                mean.to_string(),
                min.to_string(),
                max.to_string(),
            ])?;
        }
        csv.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
    .map_err(at("write"))?;
    println!("{} grid point(s) x {} seed(s) written to {}", points.len(), seeds.len(), cmd.out.display());
    Ok(())
}

fn worker_pool() -> Result<rayon::ThreadPool, Failure> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Failure::usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure { code: 1, message: format!("cannot start worker pool: {e}") })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = worker_pool().and_then(|pool| {
        pool.install(|| match cli.command {
            Command::Run(c) => cmd_run(c),
            Command::VerifyStability(c) => cmd_verify(c),
            Command::Sweep(c) => cmd_sweep(c),
        })
    });
    match result {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run_with(std::env::args_os())
}
