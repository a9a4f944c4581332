//! Synthetic benchmarks: stochastic block model graphs and planted anomalies.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;

/// Standard deviation of the per-coordinate block means.
pub const BLOCK_MEAN_SCALE: f64 = 3.0;
/// Within-block feature standard deviation.
pub const WITHIN_BLOCK_STD: f64 = 1.0;

/// Block index of `node` in a graph produced by [`generate_sbm`].
pub fn sbm_block_of(node: usize, n_per_block: usize) -> usize {
    node / n_per_block
}

/// Stochastic block model with Gaussian block features.
///
/// Node `i` belongs to block `i / n_per_block`. Each block gets a mean vector
/// with i.i.d. `N(0, BLOCK_MEAN_SCALE^2)` coordinates; node features are the
/// block mean plus i.i.d. `N(0, WITHIN_BLOCK_STD^2)` noise. Edges are drawn
/// independently per pair (probability `p_in` inside a block, `p_out`
/// across) using geometric skipping, so the cost is proportional to the
/// number of edges rather than the number of pairs. Draw order: block means,
/// node features row-major, then edges block pair by block pair.
pub fn generate_sbm(
    n_per_block: usize,
    n_blocks: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    seed: u64,
) -> Result<Graph> {
    let n = n_per_block * n_blocks;
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if p_out == p_in && n_blocks > 1 {
        log::warn!("p_in == p_out: block structure is absent");
    }
    if feature_dim < 2 {
        return Err(Error::InvalidConfig("feature_dim must be at least 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    let means: Vec<Vec<f64>> = (0..n_blocks)
        .map(|_| {
            (0..feature_dim)
                .map(|_| BLOCK_MEAN_SCALE * sample_normal(&mut rng))
                .collect()
        })
        .collect();
    let mut features = Array2::zeros((n, feature_dim));
    for i in 0..n {
        let mean = &means[sbm_block_of(i, n_per_block)];
        for f in 0..feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[i, f]] = mean[f] + WITHIN_BLOCK_STD * noise;
        }
    }
    let mut edges = Vec::new();
    for a in 0..n_blocks {
        let base_a = a * n_per_block;
        sample_within(&mut rng, n_per_block, p_in, |u, v| {
            edges.push((base_a + u, base_a + v))
        });
        for b in (a + 1)..n_blocks {
            let base_b = b * n_per_block;
            sample_between(&mut rng, n_per_block, n_per_block, p_out, |u, v| {
                edges.push((base_a + u, base_b + v))
            });
        }
    }
    let (g, _) = Graph::new(features, edges, Some(vec![0; n]))?;
    Ok(g)
}

fn sample_normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Number of failures before the next success of a Bernoulli(p) sequence.
fn geometric_skip(rng: &mut ChaCha20Rng, log_q: f64) -> u64 {
    let r: f64 = rng.random();
    // 1 - r lies in (0, 1].
    ((1.0 - r).ln() / log_q).floor() as u64
}

/// Visits each unordered pair `(u, v)`, `v < u < n`, independently with probability `p`.
fn sample_within(rng: &mut ChaCha20Rng, n: usize, p: f64, mut emit: impl FnMut(usize, usize)) {
    if p <= 0.0 || n < 2 {
        return;
    }
    let total = (n as u64) * (n as u64 - 1) / 2;
    for_each_selected(rng, total, p, |idx| {
        // Pair index idx enumerates rows u = 1.. with v = 0..u.
        let u = ((((8 * idx + 1) as f64).sqrt() + 1.0) / 2.0).floor() as u64;
        let mut u = u.max(1);
        while u * (u - 1) / 2 > idx {
            u -= 1;
        }
        while (u + 1) * u / 2 <= idx {
            u += 1;
        }
        let v = idx - u * (u - 1) / 2;
        emit(u as usize, v as usize);
    });
}

fn sample_between(
    rng: &mut ChaCha20Rng,
    n_a: usize,
    n_b: usize,
    p: f64,
    mut emit: impl FnMut(usize, usize),
) {
    if p <= 0.0 {
        return;
    }
    let total = (n_a as u64) * (n_b as u64);
    for_each_selected(rng, total, p, |idx| {
        emit((idx / n_b as u64) as usize, (idx % n_b as u64) as usize)
    });
}

fn for_each_selected(rng: &mut ChaCha20Rng, total: u64, p: f64, mut visit: impl FnMut(u64)) {
    if p >= 1.0 {
        (0..total).for_each(visit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut idx = geometric_skip(rng, log_q);
    while idx < total {
        visit(idx);
        idx = idx.saturating_add(1 + geometric_skip(rng, log_q));
    }
}

/// Which anomalies to plant and how.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnomalyPlan {
    pub contextual_fraction: f64,
    pub structural_fraction: f64,
    pub seed: u64,
    /// Mean shift of contextual anomalies, per feature, in units of the
    /// within-cluster standard deviation.
    #[serde(default = "default_shift")]
    pub contextual_shift: f64,
    /// Standard deviation multiplier for resampled contextual features.
    #[serde(default = "default_inflation")]
    pub contextual_inflation: f64,
}

fn default_shift() -> f64 {
    5.0
}

fn default_inflation() -> f64 {
    1.5
}

impl AnomalyPlan {
    pub fn new(contextual_fraction: f64, structural_fraction: f64, seed: u64) -> Self {
        AnomalyPlan {
            contextual_fraction,
            structural_fraction,
            seed,
            contextual_shift: default_shift(),
            contextual_inflation: default_inflation(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("contextual_fraction", self.contextual_fraction),
            ("structural_fraction", self.structural_fraction),
        ] {
            if !(0.0..0.5).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 0.5), got {f}")));
            }
        }
        if !self.contextual_shift.is_finite() || !(self.contextual_inflation > 0.0) {
            return Err(Error::InvalidConfig(
                "contextual shift must be finite and inflation positive".into(),
            ));
        }
        Ok(())
    }
}

/// `max(1, floor(fraction * n))` for positive fractions, zero otherwise.
pub fn anomaly_count(fraction: f64, n: usize) -> usize {
    if fraction > 0.0 {
        ((fraction * n as f64).floor() as usize).max(1)
    } else {
        0
    }
}

/// Per-feature within-cluster standard deviation estimated from edge
/// differences: `sqrt(mean_edges (x_i - x_j)^2 / 2)`. Falls back to the
/// global standard deviation without edges, and to 1 for constant features.
pub fn within_cluster_std(g: &Graph) -> Vec<f64> {
    let x = g.features();
    let d = g.feature_dim();
    let mut out = vec![0.0; d];
    if g.num_edges() > 0 {
        for &(u, v) in g.edges() {
            for f in 0..d {
                let diff = x[[u, f]] - x[[v, f]];
                out[f] += diff * diff;
            }
        }
        for o in &mut out {
            *o = (*o / (2.0 * g.num_edges() as f64)).sqrt();
        }
    } else {
        let n = g.num_nodes() as f64;
        for f in 0..d {
            let col = x.column(f);
            let mean = col.sum() / n;
            out[f] = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        }
    }
    for o in &mut out {
        if !(*o > 0.0) {
            *o = 1.0;
        }
    }
    out
}

/// Plants contextual and structural anomalies and labels them.
///
/// Contextual nodes are chosen first, then structural nodes from the rest, by
/// uniform sampling without replacement. A contextual node's features are
/// resampled from `N(x_i + shift * s * sd, (inflation * sd)^2)` per feature,
/// where `sd` is [`within_cluster_std`] and `s` a random sign. Structural
/// nodes are joined into a clique.
pub fn inject_anomalies(g: &Graph, plan: &AnomalyPlan) -> Result<Graph> {
    plan.validate()?;
    if g.labels().is_some_and(|l| l.iter().any(|&v| v != 0)) {
        return Err(Error::InvalidConfig(
            "graph already carries anomaly labels".into(),
        ));
    }
    let n = g.num_nodes();
    let n_ctx = anomaly_count(plan.contextual_fraction, n);
    let n_struct = anomaly_count(plan.structural_fraction, n);
    if n_ctx + n_struct > n {
        return Err(Error::InvalidConfig(format!(
            "{} anomalies requested for {n} nodes",
            n_ctx + n_struct
        )));
    }
    let ids = g.node_ids().map(<[String]>::to_vec);
    let sd = within_cluster_std(g);
    let (mut features, mut edges, _) = g.clone().into_parts();
    let mut labels = vec![0u8; n];
    if n_ctx + n_struct == 0 {
        log::warn!("anomaly plan selects no nodes; graph returned unchanged");
    } else {
        let mut rng = rng_from_seed(plan.seed);
        let chosen = index::sample(&mut rng, n, n_ctx + n_struct).into_vec();
        let (contextual, structural) = chosen.split_at(n_ctx);
        let mut contextual = contextual.to_vec();
        contextual.sort_unstable();
        let mut structural = structural.to_vec();
        structural.sort_unstable();
        for &i in &contextual {
            labels[i] = 1;
            for (f, &s) in sd.iter().enumerate() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[[i, f]] +=
                    plan.contextual_shift * sign * s + plan.contextual_inflation * s * noise;
            }
        }
        for (a, &u) in structural.iter().enumerate() {
            labels[u] = 1;
            for &v in &structural[a + 1..] {
                edges.push((u, v));
            }
        }
    }
    let (out, _) = Graph::new(features, edges, Some(labels))?;
    match ids {
        Some(ids) => out.with_node_ids(ids),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intra_count(g: &Graph, npb: usize) -> usize {
        g.edges()
            .iter()
            .filter(|&&(u, v)| sbm_block_of(u, npb) == sbm_block_of(v, npb))
            .count()
    }

    #[test]
    fn sbm_intra_edges_match_binomial() {
        // Binomial(2 * C(50,2), 0.2): mean 490, variance 392.
        let pairs = 2.0 * (50.0 * 49.0 / 2.0);
        let mean = pairs * 0.2;
        let sd = (pairs * 0.2 * 0.8_f64).sqrt();
        assert_eq!(mean, 490.0);
        for seed in [42, 1, 2, 3] {
            let g = generate_sbm(50, 2, 0.2, 0.01, 8, seed).unwrap();
            assert_eq!(g.num_nodes(), 100);
            let intra = intra_count(&g, 50) as f64;
            assert!((intra - mean).abs() <= 3.0 * sd, "seed {seed}: {intra}");
        }
    }

    #[test]
    fn sbm_pair_sampler_covers_all_pairs_when_p_is_one() {
        let g = generate_sbm(6, 2, 1.0, 1.0, 2, 0).unwrap();
        assert_eq!(g.num_edges(), 12 * 11 / 2);
        let g = generate_sbm(7, 3, 1.0, 0.0, 2, 0).unwrap();
        assert_eq!(g.num_edges(), 3 * 21);
        assert_eq!(intra_count(&g, 7), 3 * 21);
    }

    #[test]
    fn sbm_single_node() {
        let g = generate_sbm(1, 1, 1.0, 0.0, 2, 0).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn sbm_deterministic() {
        let a = generate_sbm(30, 3, 0.3, 0.02, 4, 9).unwrap();
        let b = generate_sbm(30, 3, 0.3, 0.02, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_sbm(30, 3, 0.3, 0.02, 4, 10).unwrap();
        assert_ne!(a.edges(), c.edges());
    }

    #[test]
    fn sbm_rejects_bad_arguments() {
        assert!(matches!(generate_sbm(0, 2, 0.5, 0.1, 2, 0), Err(Error::EmptyGraph)));
        assert!(generate_sbm(5, 2, 0.1, 0.5, 2, 0).is_err());
        assert!(generate_sbm(5, 2, 0.5, 0.1, 1, 0).is_err());
    }

    #[test]
    fn identity_plan() {
        let g = generate_sbm(20, 2, 0.3, 0.05, 3, 1).unwrap();
        let h = inject_anomalies(&g, &AnomalyPlan::new(0.0, 0.0, 5)).unwrap();
        assert_eq!(h, g);
        assert!(h.labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn contextual_count_rule() {
        let g = generate_sbm(50, 2, 0.2, 0.01, 8, 1).unwrap();
        let h = inject_anomalies(&g, &AnomalyPlan::new(0.05, 0.0, 3)).unwrap();
        assert_eq!(h.labels().unwrap().iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(h.num_nodes(), g.num_nodes());
        assert_eq!(h.feature_dim(), g.feature_dim());
        assert_eq!(h.edges(), g.edges());
        assert_eq!(anomaly_count(0.001, 100), 1);
        assert_eq!(anomaly_count(0.0, 100), 0);
    }

    #[test]
    fn structural_anomalies_form_clique() {
        let g = generate_sbm(50, 2, 0.2, 0.01, 8, 1).unwrap();
        let h = inject_anomalies(&g, &AnomalyPlan::new(0.0, 0.05, 11)).unwrap();
        let planted: Vec<usize> = (0..100).filter(|&i| h.labels().unwrap()[i] == 1).collect();
        assert_eq!(planted.len(), 5);
        let mut mutual = 0;
        for (a, &u) in planted.iter().enumerate() {
            for &v in &planted[a + 1..] {
                if h.has_edge(u, v) && h.has_edge(v, u) {
                    mutual += 1;
                }
            }
        }
        assert_eq!(mutual, 10);
        assert_eq!(h.features(), g.features());
    }

    #[test]
    fn planted_sets_are_disjoint() {
        let g = generate_sbm(50, 2, 0.2, 0.01, 8, 1).unwrap();
        let h = inject_anomalies(&g, &AnomalyPlan::new(0.1, 0.1, 2)).unwrap();
        assert_eq!(h.labels().unwrap().iter().filter(|&&l| l == 1).count(), 20);
    }

    #[test]
    fn rejects_labelled_input_and_bad_fractions() {
        let g = generate_sbm(10, 2, 0.3, 0.05, 2, 1).unwrap();
        let h = inject_anomalies(&g, &AnomalyPlan::new(0.1, 0.0, 2)).unwrap();
        assert!(inject_anomalies(&h, &AnomalyPlan::new(0.1, 0.0, 2)).is_err());
        assert!(inject_anomalies(&g, &AnomalyPlan::new(0.5, 0.0, 2)).is_err());
    }

    #[test]
    fn within_std_recovers_generator_noise() {
        let g = generate_sbm(200, 2, 0.1, 0.0, 4, 5).unwrap();
        for s in within_cluster_std(&g) {
            assert!((s - WITHIN_BLOCK_STD).abs() < 0.1, "{s}");
        }
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = generate_sbm(40, 3, 0.2, 0.05, 2, 3).unwrap();
        for i in 0..g.num_nodes() {
            for &j in g.neighbors(i) {
                assert!(g.has_edge(j, i));
            }
        }
    }
}
