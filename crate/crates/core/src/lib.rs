//! Graph anomaly detection with adapt-then-combine consensus dynamics.
//!
//! Node latents start from a shallow graph-convolution encoding and evolve
//! under two coupled forces: a contractive adaptation operator that pulls each
//! node toward the normal-data manifold, and a consensus over neighbors
//! weighted by an exponentially smoothed trust memory. Four signals collected
//! along the trajectories (neighbor inconsistency, reliability, conflict
//! energy and trajectory energy) are fused into a per-node anomaly score.
//!
//! Modules, in pipeline order:
//! - [`graph`], [`synth`]: graphs, file loading and synthetic benchmarks;
//! - [`encoder`]: initial latents;
//! - [`denoiser`]: adaptation operators;
//! - [`atc`]: the dynamics;
//! - [`scoring`]: score fusion and AUROC;
//! - [`stability`]: bounded-trajectory certificates;
//! - [`pipeline`]: end-to-end runs driven by a [`pipeline::RunManifest`].

pub mod atc;
pub mod cli;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod stability;
pub mod synth;

pub use atc::{AtcConfig, AtcState, Bandwidth, TrustState};
pub use denoiser::{DenoiserKind, DenoiserOperator, NoiseSchedule};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use graph::Graph;
pub use scoring::{ReliabilityMode, ScoreConfig, ScoreReport};
pub use stability::StabilityCertificate;
pub use synth::AnomalyPlan;
