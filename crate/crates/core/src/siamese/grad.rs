//! Analytic reverse-mode gradients of the Siamese loss.
//!
//! Real/imaginary parts of complex quantities are treated as independent real
//! variables. For a real scalar L and complex matrix X the gradient matrix is
//! `G = dL/dRe(X) + j dL/dIm(X)`, so that `dL = Re <G, dX>` under the
//! Frobenius inner product. All formulas below follow that convention.

use crate::error::Result;
use crate::numerics::ComplexMatrix;
use crate::objective::error_correlation_core;

use super::{gelu_grad, ForwardTape, NetworkWeights};

/// Loss value and its two components for one sampled channel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    /// Fairness objectives of the two branches.
    pub fairness: [f64; 2],
    /// Output-consistency distance `q(F1, F2)`.
    pub distance: f64,
}

/// Pulls a gradient on `Q` back to the QR input, for `A = Q R` square with
/// the positive-real-diagonal convention.
///
/// With `B = Q^H Q_bar` and `X = B - B^H`, the input gradient is
/// `A_bar = Q M R^{-H}` where `M` keeps the strictly lower triangle of `X`
/// and half of its (purely imaginary) diagonal. The diagonal term is exactly
/// the gauge freedom the positive-diagonal convention pins down; dropping it
/// would desynchronize these gradients from finite differences.
pub fn qr_backward(
    q: &ComplexMatrix,
    r: &ComplexMatrix,
    q_bar: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    let n = q.rows();
    let b = q.hermitian().matmul(q_bar)?;

    let mut m = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let x = b.get(i, j) - b.get(j, i).conj();
            if i > j {
                m.set(i, j, x);
            } else if i == j {
                m.set(i, j, 0.5 * x);
            }
        }
    }

    let t = q.matmul(&m)?;

    // Solve A_bar R^H = T row by row; R^H is lower triangular with the real
    // positive diagonal of R.
    let mut a_bar = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        for j in (0..n).rev() {
            let mut s = t.get(i, j);
            for k in j + 1..n {
                s -= a_bar.get(i, k) * r.get(j, k).conj();
            }
            a_bar.set(i, j, s / r.get(j, j).re);
        }
    }
    Ok(a_bar)
}

/// Fairness objective of a per-symbol MSE vector against its equal-share
/// target, together with df/de as actually computed (the target is the mean
/// of `e`, so the derivative carries the mean's dependence on every entry).
fn fairness_value_and_grad(e: &[f64]) -> (f64, Vec<f64>) {
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let num: f64 = e.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let den = n * mean * mean;
    let f = num / den;
    let grad = e
        .iter()
        .map(|&v| 2.0 * (v - mean) / den - 2.0 * f / (n * mean))
        .collect();
    (f, grad)
}

struct Branch {
    tape: ForwardTape,
    /// K F where K is the F-free error-correlation core.
    kf: ComplexMatrix,
    fairness: f64,
    /// d(fairness)/de_k.
    fairness_grad: Vec<f64>,
}

fn branch_forward(
    weights: &NetworkWeights,
    channel: &ComplexMatrix,
    sigma2: f64,
) -> Result<Branch> {
    let (_, tape) = super::forward(weights, channel)?;
    let core = error_correlation_core(channel, sigma2)?;
    let kf = core.matmul(&tape.q)?;
    let n = tape.q.cols();
    let mut e = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = 0.0;
        for r in 0..n {
            let qe = tape.q.get(r, k);
            let kfe = kf.get(r, k);
            // Re(conj(q) * kf)
            acc += qe.re * kfe.re + qe.im * kfe.im;
        }
        e.push(acc);
    }
    let (fairness, fairness_grad) = fairness_value_and_grad(&e);
    Ok(Branch {
        tape,
        kf,
        fairness,
        fairness_grad,
    })
}

/// Backpropagates a gradient on the QR output `Q` through the QR head, the
/// complex reassembly, and the fully connected stack, accumulating parameter
/// gradients into `grad`.
fn backprop_branch(
    weights: &NetworkWeights,
    tape: &ForwardTape,
    q_bar: &ComplexMatrix,
    grad: &mut NetworkWeights,
) -> Result<()> {
    let n = weights.num_subcarriers;
    let synth_bar = qr_backward(&tape.q, &tape.r, q_bar)?;

    // Complex reassembly: first N^2 outputs were real parts, last N^2
    // imaginary parts, row-major.
    let mut delta = vec![0.0f64; 2 * n * n];
    for r in 0..n {
        for c in 0..n {
            let g = synth_bar.get(r, c);
            delta[r * n + c] = g.re;
            delta[n * n + r * n + c] = g.im;
        }
    }

    // Linear output layer, then the three GELU layers.
    for li in (0..4).rev() {
        let layer = &weights.layers[li];
        let input: &[f64] = if li == 0 {
            &tape.input
        } else {
            &tape.act[li - 1]
        };
        let glayer = &mut grad.layers[li];
        for o in 0..layer.out_dim {
            let d = delta[o];
            glayer.bias[o] += d;
            let grow = &mut glayer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, z) in grow.iter_mut().zip(input) {
                *gw += d * z;
            }
        }
        if li == 0 {
            break;
        }
        let mut prev = vec![0.0f64; layer.in_dim];
        for o in 0..layer.out_dim {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (p, w) in prev.iter_mut().zip(wrow) {
                *p += d * w;
            }
        }
        for (p, &a) in prev.iter_mut().zip(&tape.pre[li - 1]) {
            *p *= gelu_grad(a);
        }
        delta = prev;
    }
    Ok(())
}

/// Loss and exact parameter gradient for one sampled channel pair.
///
/// Runs the shared-weight forward pass on both channels, evaluates
/// `Loss = (lambda/2)(f1 + f2) + (1 - lambda) q`, and accumulates the
/// reverse-mode gradient through both branches. The per-channel solve for
/// the error-correlation core happens once per branch and is reused by the
/// value and gradient computations.
pub fn loss_and_gradient(
    weights: &NetworkWeights,
    channel1: &ComplexMatrix,
    channel2: &ComplexMatrix,
    sigma2: f64,
    lambda: f64,
) -> Result<(LossTerms, NetworkWeights)> {
    let n = weights.num_subcarriers;
    let b1 = branch_forward(weights, channel1, sigma2)?;
    let b2 = branch_forward(weights, channel2, sigma2)?;

    let diff = b1.tape.q.sub(&b2.tape.q)?;
    let fro = diff.frob_norm();
    let distance = fro * fro / n as f64;
    let loss = lambda / 2.0 * (b1.fairness + b2.fairness) + (1.0 - lambda) * distance;

    // dLoss/dQ_i: fairness pulls through e_k = q_k^H K q_k (gradient 2 K q_k
    // per unit of de_k), the distance term through the entrywise difference.
    let dist_scale = (1.0 - lambda) * 2.0 / n as f64;
    let mut q1_bar = ComplexMatrix::zeros(n, n);
    let mut q2_bar = ComplexMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let w1 = lambda * b1.fairness_grad[c];
            let w2 = lambda * b2.fairness_grad[c];
            let d = diff.get(r, c);
            q1_bar.set(r, c, b1.kf.get(r, c) * w1 + d * dist_scale);
            q2_bar.set(r, c, b2.kf.get(r, c) * w2 - d * dist_scale);
        }
    }

    let mut grad = NetworkWeights::zeros(n, weights.guard_len);
    backprop_branch(weights, &b1.tape, &q1_bar, &mut grad)?;
    backprop_branch(weights, &b2.tape, &q2_bar, &mut grad)?;

    Ok((
        LossTerms {
            loss,
            fairness: [b1.fairness, b2.fairness],
            distance,
        },
        grad,
    ))
}
