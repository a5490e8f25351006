//! Minimal dense neural-network machinery: parameters with co-located
//! gradients, transformer building blocks with explicit forward caches and
//! hand-derived backward passes, and a decoupled-weight-decay optimizer.
//!
//! Everything is `f64` and single-threaded; given the same seed every
//! forward/backward/step sequence is bit-reproducible.

mod layers;
mod optim;

pub use layers::{
    AttnCache, BlockCache, Embedding, FeedForward, FfnCache, LayerNorm, Linear, LnCache,
    MultiHeadAttention, TransformerBlock,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};

use ndarray::Array2;
use rand::Rng;

/// A weight matrix together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Param {
        Param {
            v: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn from_value(v: Array2<f64>) -> Param {
        let g = Array2::zeros(v.raw_dim());
        Param { v, g }
    }

    /// Xavier-uniform initialization for a (fan_in, fan_out) weight.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Param {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut v = Array2::zeros((fan_in, fan_out));
        for x in v.iter_mut() {
            *x = rng.random::<f64>() * 2.0 * a - a;
        }
        Param::from_value(v)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Param {
        let mut v = Array2::zeros((rows, cols));
        for x in v.iter_mut() {
            *x = rand_normal(rng) * std;
        }
        Param::from_value(v)
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn count(&self) -> usize {
        self.v.len()
    }
}

/// Standard normal draw via Box-Muller; consumes exactly two uniforms.
pub fn rand_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Matrix of standard normal draws, filled row-major.
pub fn rand_normal_array<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for x in out.iter_mut() {
        *x = rand_normal(rng);
    }
    out
}

/// Nonlinearity choice. `Identity` exists so projection heads can be put in
/// a pass-through test mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
            Activation::Identity => 1.0,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fixed sinusoidal positional encoding of shape (len, dim).
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, dim));
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[p, 2 * i]] = (p as f64 * freq).sin();
            pe[[p, 2 * i + 1]] = (p as f64 * freq).cos();
        }
    }
    pe
}

/// Sinusoidal embedding of a scalar timestep as a (1, dim) row.
pub fn timestep_embedding(t: usize, dim: usize) -> Array2<f64> {
    let mut e = Array2::zeros((1, dim));
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        e[[0, 2 * i]] = (t as f64 * freq).sin();
        e[[0, 2 * i + 1]] = (t as f64 * freq).cos();
    }
    e
}

/// Numerically stable row-wise softmax in place.
pub fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Central finite-difference gradient oracle used by the verification
/// suites. Models expose their parameters through a named visitor, so the
/// oracle perturbs entries in place and re-evaluates a loss closure; it never
/// touches the analytic backward path it is checking.
pub mod gradcheck {
    use super::Param;
    use ndarray::Array2;

    /// Numerically differentiates `loss` with respect to the named parameter
    /// of `model` via central differences.
    pub fn numeric_gradient_named<M, V, L>(
        model: &mut M,
        name: &str,
        step: f64,
        visit: V,
        loss: L,
    ) -> Array2<f64>
    where
        V: Fn(&mut M, &mut dyn FnMut(String, &mut Param)),
        L: Fn(&M) -> f64,
    {
        let mut shape = None;
        visit(model, &mut |n, p| {
            if n == name {
                shape = Some(p.v.raw_dim());
            }
        });
        let dim = shape.unwrap_or_else(|| panic!("parameter {name} not found"));
        let mut grad = Array2::zeros(dim);
        for r in 0..dim[0] {
            for c in 0..dim[1] {
                let bump = |m: &mut M, delta: f64| {
                    visit(m, &mut |n, p| {
                        if n == name {
                            p.v[[r, c]] += delta;
                        }
                    });
                };
                bump(model, step);
                let up = loss(model);
                bump(model, -2.0 * step);
                let down = loss(model);
                bump(model, step);
                grad[[r, c]] = (up - down) / (2.0 * step);
            }
        }
        grad
    }

    /// Relative L2 distance between two gradients. When both norms sit at
    /// the finite-difference noise floor the gradients are treated as equal;
    /// a key-projection bias, for example, cancels inside softmax and has an
    /// exactly-zero true gradient either way.
    pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm_a: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_n: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_a < 1e-7 && norm_n < 1e-7 {
            return 0.0;
        }
        diff / norm_n.max(1e-6)
    }
}
