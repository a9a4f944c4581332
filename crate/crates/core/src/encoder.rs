//! Shallow graph-convolution encoder producing the initial latent states.
//!
//! The encoder is an untrained initializer: projection matrices are drawn from
//! a seeded Glorot-uniform distribution and never fitted.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub latent_dim: usize,
    pub projection_seed: u64,
    /// Apply `max(0, x)` after every layer except the last.
    pub use_nonlinearity: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            latent_dim: 16,
            projection_seed: 0,
            use_nonlinearity: true,
        }
    }
}

/// One symmetric-normalized propagation with virtual self-loops:
/// `out_i = sum_{j in N(i) + {i}} h_j / sqrt(d_i d_j)`, `d_i = deg(i) + 1`.
///
/// Each row sums its own term first, then neighbors in ascending order.
pub fn normalized_propagate(g: &Graph, h: &Array2<f64>) -> Result<Array2<f64>> {
    if h.nrows() != g.num_nodes() {
        return Err(Error::Shape(format!(
            "{} rows for a graph with {} nodes",
            h.nrows(),
            g.num_nodes()
        )));
    }
    let deg: Vec<f64> = (0..g.num_nodes())
        .map(|i| (g.degree(i) + 1) as f64)
        .collect();
    let mut out = Array2::zeros(h.raw_dim());
    Zip::indexed(out.axis_iter_mut(Axis(0))).par_for_each(|i, mut row| {
        row.scaled_add(1.0 / deg[i], &h.row(i));
        for &j in g.neighbors(i) {
            row.scaled_add(1.0 / (deg[i] * deg[j]).sqrt(), &h.row(j));
        }
    });
    Ok(out)
}

/// Glorot-uniform matrix: entries i.i.d. uniform on `[-s, s]`,
/// `s = sqrt(6 / (fan_in + fan_out))`, drawn row-major.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-s..=s))
}

/// The projection matrices used by [`encode`], in layer order.
pub fn projection_weights(input_dim: usize, cfg: &EncoderConfig) -> Vec<Array2<f64>> {
    let mut rng = rng_from_seed(cfg.projection_seed);
    let layers = cfg.num_layers.max(1);
    let mut fan_in = input_dim;
    (0..layers)
        .map(|_| {
            let w = glorot_uniform(fan_in, cfg.latent_dim, &mut rng);
            fan_in = cfg.latent_dim;
            w
        })
        .collect()
}

/// Initial latent states `z^(0)`.
///
/// With `num_layers = 0` the features are projected once (no propagation), or
/// returned unchanged when `latent_dim` already equals the feature dimension.
pub fn encode(g: &Graph, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    if cfg.latent_dim == 0 {
        return Err(Error::InvalidConfig("latent_dim must be at least 1".into()));
    }
    let x = g.features();
    if cfg.num_layers == 0 {
        if cfg.latent_dim == x.ncols() {
            return Ok(x.clone());
        }
        let w = projection_weights(x.ncols(), cfg);
        return Ok(x.dot(&w[0]));
    }
    let weights = projection_weights(x.ncols(), cfg);
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        h = normalized_propagate(g, &h)?.dot(w);
        if cfg.use_nonlinearity && l + 1 < weights.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(h)
}
