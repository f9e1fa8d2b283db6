//! Siamese-trained network that maps channel matrices to unitary modulations.
//!
//! The channel matrix enters as a dual-channel real image (real and imaginary
//! parts of the (N + N_g) x N matrix, flattened), passes through three fully
//! connected GELU layers of widths 8N, 4N, and 4N, and a linear output layer
//! of width 2N^2. The output is reassembled into a complex N x N matrix and
//! projected onto the unitary manifold by QR with the positive-real-diagonal
//! convention, so the network output is always a valid modulation matrix and
//! the projection is smooth away from rank deficiency.
//!
//! Training runs the network twice per sampling iteration, once per channel
//! draw, and descends a loss that mixes per-symbol MSE fairness with the
//! disagreement between the two outputs; see [`grad`] for the analytic
//! reverse-mode gradients and [`train`] for the optimizer and loop.

mod grad;
mod train;

pub use grad::{loss_and_gradient, qr_backward, LossTerms};
pub use train::{
    adam_step, finalize_modulation, load_checkpoint, save_checkpoint, test_statistics, train,
    train_from, write_training_log, BatchRecord, Checkpoint, TestStats, TrainConfig, TrainState,
};

use num_complex::Complex64;
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::modem::ModulationMatrix;
use crate::numerics::{householder_qr, ComplexMatrix};
use crate::rng;

/// Exact GELU activation `x * Phi(x)` with the erf-based normal CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    x.mul_add(normal_pdf(x), normal_cdf(x))
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One fully connected layer: `out = W z + b` with row-major `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], output: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        output.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let dot: f64 = row.iter().zip(input).map(|(w, z)| w * z).sum();
            output.push(dot + self.bias[o]);
        }
    }
}

/// The four-layer network's parameters (also used as a gradient container,
/// since gradients mirror the parameter shapes exactly).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub num_subcarriers: usize,
    pub guard_len: usize,
    pub layers: Vec<Layer>,
}

/// Layer widths for a given block geometry:
/// `2 (N + N_g) N -> 8N -> 4N -> 4N -> 2 N^2`.
pub fn layer_dims(num_subcarriers: usize, guard_len: usize) -> [(usize, usize); 4] {
    let n = num_subcarriers;
    let input = 2 * (n + guard_len) * n;
    [
        (input, 8 * n),
        (8 * n, 4 * n),
        (4 * n, 4 * n),
        (4 * n, 2 * n * n),
    ]
}

impl NetworkWeights {
    /// Zero-initialized container with the right shapes.
    pub fn zeros(num_subcarriers: usize, guard_len: usize) -> Self {
        let layers = layer_dims(num_subcarriers, guard_len)
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Self {
            num_subcarriers,
            guard_len,
            layers,
        }
    }

    /// Scaled uniform fan-in initialization: each weight is uniform in
    /// `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`; biases start at
    /// zero. Draw order is fixed (layers in order, weights row-major).
    pub fn init(num_subcarriers: usize, guard_len: usize, rng: &mut impl RngCore) -> Self {
        let mut w = Self::zeros(num_subcarriers, guard_len);
        for layer in &mut w.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for v in &mut layer.weights {
                *v = bound * (2.0 * rng::next_f64(rng) - 1.0);
            }
        }
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `self += other`, entrywise.
    pub fn add_assign(&mut self, other: &NetworkWeights) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// Visits every parameter (weights of each layer, then its biases).
    pub fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.weights.iter().for_each(|&v| f(v));
            l.bias.iter().for_each(|&v| f(v));
        }
    }

    /// Mutable access to parameter `index` in the [`for_each_param`] order.
    ///
    /// [`for_each_param`]: NetworkWeights::for_each_param
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut ix = index;
        for l in &mut self.layers {
            if ix < l.weights.len() {
                return &mut l.weights[ix];
            }
            ix -= l.weights.len();
            if ix < l.bias.len() {
                return &mut l.bias[ix];
            }
            ix -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Flattened input: real parts then imaginary parts, row-major.
    pub input: Vec<f64>,
    /// Pre-activations of the three GELU layers.
    pub pre: [Vec<f64>; 3],
    /// Post-activations of the three GELU layers.
    pub act: [Vec<f64>; 3],
    /// Pre-QR complex matrix reassembled from the output layer.
    pub synth: ComplexMatrix,
    /// QR factors of `synth`.
    pub q: ComplexMatrix,
    pub r: ComplexMatrix,
}

/// Runs the network on one channel matrix and returns the unitary modulation
/// along with the tape needed for reverse-mode differentiation.
pub fn forward(
    weights: &NetworkWeights,
    channel: &ComplexMatrix,
) -> Result<(ModulationMatrix, ForwardTape)> {
    let n = weights.num_subcarriers;
    let rows = n + weights.guard_len;
    if channel.rows() != rows || channel.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "network expects a {rows}x{n} channel, got {}x{}",
            channel.rows(),
            channel.cols()
        )));
    }

    let mut input = Vec::with_capacity(2 * rows * n);
    input.extend(channel.data().iter().map(|z| z.re));
    input.extend(channel.data().iter().map(|z| z.im));

    let mut pre1 = Vec::new();
    weights.layers[0].apply(&input, &mut pre1);
    let act1: Vec<f64> = pre1.iter().map(|&x| gelu(x)).collect();

    let mut pre2 = Vec::new();
    weights.layers[1].apply(&act1, &mut pre2);
    let act2: Vec<f64> = pre2.iter().map(|&x| gelu(x)).collect();

    let mut pre3 = Vec::new();
    weights.layers[2].apply(&act2, &mut pre3);
    let act3: Vec<f64> = pre3.iter().map(|&x| gelu(x)).collect();

    let mut out = Vec::new();
    weights.layers[3].apply(&act3, &mut out);

    // First N^2 outputs are real parts, last N^2 imaginary, row-major.
    let synth = ComplexMatrix::from_fn(n, n, |r, c| {
        Complex64::new(out[r * n + c], out[n * n + r * n + c])
    });

    let (q, r) = householder_qr(&synth)?;
    let modulation = ModulationMatrix::new(q.clone())?;

    Ok((
        modulation,
        ForwardTape {
            input,
            pre: [pre1, pre2, pre3],
            act: [act1, act2, act3],
            synth,
            q,
            r,
        },
    ))
}
