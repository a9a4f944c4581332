//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use atcgad::atc::{self, collapsed_form};
use atcgad::pipeline::{self, benchmark_manifest, latent_mean};
use atcgad::scoring::{self, auroc, reliability_weights};
use atcgad::stability::verify_stability_nodes;
use atcgad::synth::{generate_sbm, inject_anomalies};
use atcgad::{AnomalyPlan, AtcConfig, Bandwidth, DenoiserOperator, Graph, ScoreConfig};
use common::{dense_adjacency, naive_run, pair_auroc, random_graph, rng, rows, trust_ratio, Op};
use ndarray::Array2;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "[{}] criterion {id}: {name} ({:.2}s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
}

fn random_affine(r: &mut impl Rng, d: usize) -> (DenoiserOperator, Op) {
    let scale = r.random_range(0.1..0.9) / d as f64;
    let m: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| r.random_range(-scale..scale)).collect()).collect();
    let b: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    (DenoiserOperator::linear(m.clone(), b.clone()).unwrap(), Op::Affine { m, b })
}

fn random_sigma(r: &mut impl Rng) -> Bandwidth {
    if r.random::<bool>() {
        Bandwidth::Median
    } else {
        Bandwidth::Fixed(r.random_range(0.2..3.0))
    }
}

fn collapsed_form_equivalence() -> Outcome {
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..=64);
        let d = r.random_range(1..=16);
        let p = r.random_range(0.02..0.5);
        let g = random_graph(&mut r, n, d, p);
        let (op, _) = random_affine(&mut r, d);
        let cfg = AtcConfig {
            iterations: r.random_range(1..=8),
            alpha: r.random_range(0.01..1.0),
            gamma: r.random_range(0.0..0.99),
            sigma: random_sigma(&mut r),
            ..Default::default()
        };
        atc::run_observed(&g, g.features(), &op, &cfg, |step| {
            for i in 0..n {
                let one = collapsed_form(step.z.row(i), step.consensus.row(i), &op, cfg.alpha).unwrap();
                for f in 0..d {
                    worst = worst.max((one[f] - step.z_next[[i, f]]).abs());
                }
            }
        })
        .unwrap();
    }
    Outcome { pass: worst < 1e-12, detail: format!("max |diff| = {worst:.3e} (tol 1e-12)") }
}

fn whole_run_oracle() -> Outcome {
    let mut r = rng(2002);
    let mut worst: f64 = 0.0;
    for case in 0..25 {
        let n = r.random_range(2..=50);
        let d = r.random_range(1..=6);
        let p = r.random_range(0.05..0.4);
        let g = random_graph(&mut r, n, d, p);
        let (op, oop) = match case % 3 {
            0 => (DenoiserOperator::identity(), Op::Identity),
            1 => {
                let center: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                let ratio = r.random_range(0.0..0.99);
                (DenoiserOperator::shrinkage(center.clone(), ratio).unwrap(), Op::Shrink { center, ratio })
            }
            _ => random_affine(&mut r, d),
        };
        let cfg = AtcConfig {
            iterations: r.random_range(1..=10),
            alpha: r.random_range(0.01..1.0),
            gamma: r.random_range(0.0..0.99),
            sigma: random_sigma(&mut r),
            ..Default::default()
        };
        let state = atc::run(&g, g.features(), &op, &cfg).unwrap();
        let sigma = match cfg.sigma {
            Bandwidth::Fixed(s) => Some(s),
            Bandwidth::Median => None,
        };
        let o = naive_run(&dense_adjacency(&g), &rows(g.features()), &oop, cfg.iterations, cfg.alpha, cfg.gamma, sigma);
        worst = worst.max(common::max_abs_diff(&state.z, &o.z));
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            worst = worst.max((state.trust.values[e] - o.trust[u][v]).abs());
        }
        for i in 0..n {
            worst = worst
                .max((state.inconsistency[i] - o.r[i]).abs())
                .max((state.energy[i] - o.energy[i]).abs())
                .max((state.conflict[i] - o.conflict[i]).abs());
        }
    }
    Outcome { pass: worst < 1e-9, detail: format!("max |diff| over z, T, r, E, conflict = {worst:.3e} (tol 1e-9)") }
}

fn stability_certificate() -> Outcome {
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut flag_disagreements = 0usize;
    let mut tightest = f64::INFINITY;
    for &rho in &[0.3, 0.5, 0.8] {
        for &alpha in &[0.5, 0.8, 1.0] {
            for seed in 0..10u64 {
                let g = generate_sbm(50, 2, 0.2, 0.01, 8, seed).unwrap();
                let g = inject_anomalies(&g, &AnomalyPlan::new(0.05, 0.0, seed + 100)).unwrap();
                let z0 = g.features().clone();
                let center = latent_mean(&z0);
                let op = DenoiserOperator::shrinkage(center.clone(), rho).unwrap();
                let cfg = AtcConfig { iterations: 50, alpha, gamma: 0.9, sigma: Bandwidth::Median, ..Default::default() };
                let labels = g.labels().unwrap().to_vec();
                let normal: Vec<usize> = (0..g.num_nodes()).filter(|&i| labels[i] == 0).collect();
                let n = g.num_nodes();
                let dist = |m: &Array2<f64>, i: usize| m.row(i).iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let mut curves: Vec<Vec<f64>> = (0..n).map(|i| vec![dist(&z0, i)]).collect();
                let mut eps = vec![0.0f64; n];
                atc::run_observed(&g, &z0, &op, &cfg, |s| {
                    for i in 0..n {
                        let delta = s.consensus.row(i).iter().zip(s.z.row(i)).map(|(c, z)| (c - z).powi(2)).sum::<f64>().sqrt();
                        eps[i] = eps[i].max(delta);
                        curves[i].push(dist(s.z_next, i));
                    }
                })
                .unwrap();
                let certs = verify_stability_nodes(&g, &z0, &op, &cfg, None, &normal).unwrap();
                let factor = 1.0 - alpha + alpha * rho;
                for (cert, &i) in certs.iter().zip(&normal) {
                    let steady = (1.0 - alpha) * eps[i] / (alpha * (1.0 - rho));
                    let mut ok = true;
                    for (k, &e) in curves[i].iter().enumerate() {
                        let bound = factor.powi(k as i32) * curves[i][0] + steady;
                        tightest = tightest.min(bound - e);
                        if e > bound + 1e-9 {
                            ok = false;
                        }
                    }
                    checked += 1;
                    violations += usize::from(!ok);
                    flag_disagreements += usize::from(ok != cert.satisfied);
                }
            }
        }
    }
    Outcome {
        pass: violations == 0 && flag_disagreements == 0,
        detail: format!(
            "{checked} normal-node curves, {violations} violations, {flag_disagreements} certificate disagreements, min slack {tightest:.3e}"
        ),
    }
}

struct BenchmarkStats {
    trust_ratio: f64,
    fused: f64,
    signals: [f64; 4],
}

fn benchmark_stats(alpha: f64, ratio: f64) -> BenchmarkStats {
    let mut trust = 0.0;
    let mut fused = 0.0;
    let mut signals = [0.0; 4];
    for seed in 0..10u64 {
        let mut m = benchmark_manifest(seed);
        m.atc.alpha = alpha;
        m.denoiser = pipeline::DenoiserSpec::Shrinkage { ratio, center: pipeline::CenterRule::Mean };
        let out = pipeline::execute(&m).unwrap();
        let labels = out.graph.labels().unwrap();
        trust += trust_ratio(&out.graph, &out.state.trust.values);
        fused += out.auroc.unwrap();
        let per = [
            out.report.nodes.iter().map(|s| s.r).collect::<Vec<_>>(),
            out.report.nodes.iter().map(|s| 1.0 - s.w).collect(),
            out.report.nodes.iter().map(|s| s.conflict).collect(),
            out.report.nodes.iter().map(|s| s.energy).collect(),
        ];
        for (acc, s) in signals.iter_mut().zip(&per) {
            *acc += auroc(s, labels).unwrap();
        }
    }
    BenchmarkStats { trust_ratio: trust / 10.0, fused: fused / 10.0, signals: signals.map(|s| s / 10.0) }
}

fn fixture_alpha_ratio() -> (f64, f64) {
    let m = benchmark_manifest(0);
    match m.denoiser {
        pipeline::DenoiserSpec::Shrinkage { ratio, .. } => (m.atc.alpha, ratio),
        _ => unreachable!("benchmark uses a shrinkage operator"),
    }
}

fn trust_suppression(stats: &BenchmarkStats) -> Outcome {
    Outcome {
        pass: stats.trust_ratio < 0.5,
        detail: format!("anomaly-incident / normal-normal mean trust = {:.4} (need < 0.5)", stats.trust_ratio),
    }
}

fn score_separation(stats: &BenchmarkStats) -> Outcome {
    let s = stats.signals;
    Outcome {
        pass: stats.fused >= 0.80 && s.iter().all(|&a| a > 0.5),
        detail: format!(
            "fused AUROC {:.4} (need >= 0.80); r {:.4}, 1-w {:.4}, conflict {:.4}, E {:.4} (each need > 0.5)",
            stats.fused, s[0], s[1], s[2], s[3]
        ),
    }
}

fn null_cases() -> Outcome {
    let mut r = rng(6006);
    let mut frozen = true;
    for _ in 0..20 {
        let n = r.random_range(2..40);
        let g = random_graph(&mut r, n, 4, 0.2);
        let cfg = AtcConfig { iterations: 15, alpha: 1.0, gamma: r.random_range(0.0..0.99), ..Default::default() };
        let state = atc::run(&g, g.features(), &DenoiserOperator::identity(), &cfg).unwrap();
        frozen &= state.z == *g.features() && state.energy.iter().all(|&e| e == 0.0);
    }
    // A cycle with identical features: every node sees the same neighborhood.
    let n = 12;
    let x = Array2::from_shape_fn((n, 3), |(_, f)| 1.0 + f as f64);
    let g = Graph::new(x, (0..n).map(|i| (i, (i + 1) % n)), None).unwrap().0;
    let op = DenoiserOperator::shrinkage(vec![0.0; 3], 0.7).unwrap();
    let cfg = AtcConfig { iterations: 25, alpha: 0.6, ..Default::default() };
    let state = atc::run(&g, g.features(), &op, &cfg).unwrap();
    let score_cfg = ScoreConfig::default();
    let w = reliability_weights(&state.trust, &g, score_cfg.reliability_mode);
    let scores = scoring::fuse_scores(&state, &w, &score_cfg, cfg.iterations).unwrap().scores();
    let spread = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - scores.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Outcome {
        pass: frozen && spread <= 1e-12,
        detail: format!("identity/alpha=1 frozen with E = 0: {frozen}; homogeneous score spread {spread:.3e} (tol 1e-12)"),
    }
}

fn auroc_exactness() -> Outcome {
    let mut r = rng(7007);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..80);
        let levels = r.random_range(1..10);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.5).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        if auroc(&scores, &labels).unwrap() != pair_auroc(&scores, &labels) {
            mismatches += 1;
        }
    }
    Outcome { pass: mismatches == 0, detail: format!("{mismatches} of 1000 tied instances differ from pair counting") }
}

fn cli(args: &[String], workers: usize) -> i32 {
    std::env::set_var(atcgad::cli::WORKERS_ENV, workers.to_string());
    let code = atcgad::cli::run_with(std::iter::once("atcgad".to_string()).chain(args.iter().cloned()));
    std::env::remove_var(atcgad::cli::WORKERS_ENV);
    code
}

fn performance(dir: &Path) -> Outcome {
    let g = generate_sbm(10_000, 10, 0.0022, 0.000022, 32, 0).unwrap();
    let edges = g.num_edges();
    drop(g);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut times = Vec::new();
    let mut outputs = Vec::new();
    for workers in [1, cores.max(4)] {
        let out = dir.join(format!("perf-{workers}"));
        let args: Vec<String> = format!(
            "run --synthetic sbm:10000x10 --p-in 0.0022 --p-out 0.000022 --feature-dim 32 --inject contextual:0.05 --K 20 --seed 0 --out-dir {}",
            out.display()
        )
        .split(' ')
        .map(String::from)
        .collect();
        let start = Instant::now();
        let code = cli(&args, workers);
        times.push(start.elapsed().as_secs_f64());
        if code != 0 {
            return Outcome { pass: false, detail: format!("run exited with {code}") };
        }
        outputs.push(std::fs::read(out.join("scores.csv")).unwrap());
    }
    let same = outputs[0] == outputs[1];
    let edges_ok = (edges as f64 - 1.2e6).abs() / 1.2e6 < 0.05;
    Outcome {
        pass: same && edges_ok && times.iter().all(|&t| t < 300.0),
        detail: format!(
            "N = 100000, |E| = {edges}, d_z = 32, K = 20: {:.1}s with 1 worker, {:.1}s with {} workers on {cores} core(s); identical scores: {same}",
            times[0],
            times[1],
            cores.max(4)
        ),
    }
}

fn determinism(dir: &Path) -> Outcome {
    let first = dir.join("det-first");
    let args: Vec<String> = format!(
        "run --synthetic sbm:50x2 --inject contextual:0.05,structural:0.05 --K 20 --alpha 0.7 --gamma 0.9 --sigma median --seed 7 --trace --out-dir {}",
        first.display()
    )
    .split(' ')
    .map(String::from)
    .collect();
    if cli(&args, 1) != 0 {
        return Outcome { pass: false, detail: "first run failed".into() };
    }
    let original = std::fs::read(first.join("scores.csv")).unwrap();
    let mut identical = true;
    for workers in [1, 2, 7] {
        let again = dir.join(format!("det-{workers}"));
        let args = vec![
            "run".to_string(),
            "--manifest".into(),
            first.join("manifest.json").display().to_string(),
            "--out-dir".into(),
            again.display().to_string(),
        ];
        identical &= cli(&args, workers) == 0 && std::fs::read(again.join("scores.csv")).unwrap() == original;
    }
    Outcome { pass: identical, detail: format!("manifest reruns with 1, 2, 7 workers byte-identical: {identical}") }
}

fn timed(id: usize, name: &str, budget: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed.as_secs_f64() >= b {
            o.pass = false;
            o.detail.push_str(&format!("; over the {b}s budget"));
        }
    }
    report(id, name, elapsed, &o);
    o.pass
}

fn main() {
    // Honor the harness's listing flag so `cargo test -- --list` stays quiet.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    results.push(timed(1, "collapsed-form equivalence", Some(10.0), collapsed_form_equivalence));
    results.push(timed(2, "whole-run oracle equivalence", Some(30.0), whole_run_oracle));
    results.push(timed(3, "stability certificate", Some(60.0), stability_certificate));

    let (alpha, ratio) = fixture_alpha_ratio();
    let start = Instant::now();
    let stats = benchmark_stats(alpha, ratio);
    let bench_time = start.elapsed();
    let o4 = trust_suppression(&stats);
    report(4, &format!("trust suppression (alpha {alpha}, shrinkage ratio {ratio})"), bench_time, &o4);
    let mut o5 = score_separation(&stats);
    if bench_time.as_secs_f64() >= 60.0 {
        o5.pass = false;
    }
    report(5, "score separation", bench_time, &o5);
    results.push(o4.pass);
    results.push(o5.pass);

    // Not a criterion: the same fixture under strong coupling, where
    // trajectories merge before K and trust recovers.
    let strong = benchmark_stats(0.7, 0.9);
    println!(
        "[INFO] strong coupling (alpha 0.7, ratio 0.9): trust ratio {:.4}, fused AUROC {:.4}",
        strong.trust_ratio, strong.fused
    );

    results.push(timed(6, "null-case exactness", None, null_cases));
    results.push(timed(7, "AUROC exactness with ties", None, auroc_exactness));
    results.push(timed(8, "performance at 100k nodes", None, || performance(dir.path())));
    results.push(timed(9, "manifest determinism", None, || determinism(dir.path())));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
