//! LMMSE error statistics and the training objective.
//!
//! Under LMMSE equalization the error correlation matrix of one block is
//! `C = sigma^2 F^H (H^H H + sigma^2 I)^{-1} F`. Its trace does not depend on
//! the unitary modulation F, so modulation design cannot change the total MSE;
//! it can only redistribute the per-symbol shares on the diagonal. The
//! fairness objective measures how far that diagonal sits from an equal
//! split, and the Siamese distance penalizes disagreement between the
//! matrices produced for two different channels.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::modem::ModulationMatrix;
use crate::numerics::{hermitian_solve, ComplexMatrix};

/// Per-symbol LMMSE mean square errors and their (modulation-invariant) total.
#[derive(Debug, Clone, PartialEq)]
pub struct MseProfile {
    /// Diagonal of the error correlation matrix, one entry per data symbol.
    pub e: Vec<f64>,
    /// Sum of the entries, equal to trace(C).
    pub total: f64,
}

/// Which fairness target to use for the optimal per-symbol MSE profile.
///
/// `EqualShare` splits the invariant total MSE evenly (trace(C)/N per symbol),
/// which conserves the total. `ReciprocalTrace` sets every entry to
/// 1/trace(C); it does not sum to the invariant total and is kept only for
/// reproduction studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FairnessTarget {
    #[default]
    EqualShare,
    ReciprocalTrace,
}

/// The F-free core `K = sigma^2 (H^H H + sigma^2 I)^{-1}`.
///
/// This equals the error correlation under identity modulation; congruence by
/// any unitary F then gives `C = F^H K F`, so the expensive solve happens once
/// per channel and is reused across modulation candidates.
pub fn error_correlation_core(h: &ComplexMatrix, sigma2: f64) -> Result<ComplexMatrix> {
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::InvalidInput(format!("noise variance {sigma2} must be > 0")));
    }
    let hh = h.hermitian().matmul(h)?;
    let n = hh.rows();
    let mut m = hh;
    for i in 0..n {
        let d = m.get(i, i);
        m.set(i, i, d + Complex64::new(sigma2, 0.0));
    }
    let rhs = ComplexMatrix::identity(n).scale(Complex64::new(sigma2, 0.0));
    hermitian_solve(&m, &rhs)
}

/// LMMSE error correlation matrix `C = sigma^2 F^H (H^H H + sigma^2 I)^{-1} F`.
pub fn error_correlation(
    h: &ComplexMatrix,
    f: &ModulationMatrix,
    sigma2: f64,
) -> Result<ComplexMatrix> {
    let core = error_correlation_core(h, sigma2)?;
    congruence(&core, f.as_matrix())
}

/// `F^H core F` for a raw (not necessarily unitary) matrix F.
fn congruence(core: &ComplexMatrix, f: &ComplexMatrix) -> Result<ComplexMatrix> {
    f.hermitian().matmul(&core.matmul(f)?)
}

/// Extracts the per-symbol MSE profile from an error correlation matrix.
///
/// The diagonal of a Hermitian PD matrix is real positive; an imaginary
/// residue above 1e-12 or an entry below -1e-12 means the matrix was not an
/// error correlation matrix at all and is reported as corruption.
pub fn mse_profile(c: &ComplexMatrix) -> Result<MseProfile> {
    if !c.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "error correlation must be square, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    let mut e = Vec::with_capacity(c.rows());
    for k in 0..c.rows() {
        let d = c.get(k, k);
        if d.im.abs() >= 1e-12 {
            return Err(Error::Corrupt(format!(
                "diagonal entry {k} has imaginary residue {:e}",
                d.im
            )));
        }
        if d.re < -1e-12 {
            return Err(Error::Corrupt(format!(
                "diagonal entry {k} is negative: {:e}",
                d.re
            )));
        }
        e.push(d.re);
    }
    let total = e.iter().sum();
    Ok(MseProfile { e, total })
}

/// The fairness target profile under the default equal-share rule.
pub fn optimal_profile(c: &ComplexMatrix) -> Result<MseProfile> {
    optimal_profile_with(c, FairnessTarget::EqualShare)
}

/// The fairness target profile under an explicit rule.
pub fn optimal_profile_with(c: &ComplexMatrix, target: FairnessTarget) -> Result<MseProfile> {
    let profile = mse_profile(c)?;
    let n = profile.e.len();
    let value = match target {
        FairnessTarget::EqualShare => profile.total / n as f64,
        FairnessTarget::ReciprocalTrace => 1.0 / profile.total,
    };
    Ok(MseProfile {
        e: vec![value; n],
        total: value * n as f64,
    })
}

/// Fairness objective `f = ||e - e_opt||^2 / ||e_opt||^2`.
pub fn fairness_objective(e: &MseProfile, e_opt: &MseProfile) -> Result<f64> {
    if e.e.len() != e_opt.e.len() {
        return Err(Error::DimensionMismatch(format!(
            "profiles have lengths {} and {}",
            e.e.len(),
            e_opt.e.len()
        )));
    }
    let denom: f64 = e_opt.e.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(Error::InvalidInput("fairness target has zero norm".into()));
    }
    let num: f64 = e
        .e
        .iter()
        .zip(&e_opt.e)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

/// Siamese distance `q = ||F1 - F2||_F^2 / N`.
pub fn siamese_distance(f1: &ModulationMatrix, f2: &ModulationMatrix) -> Result<f64> {
    if f1.order() != f2.order() {
        return Err(Error::DimensionMismatch(format!(
            "modulation orders {} and {}",
            f1.order(),
            f2.order()
        )));
    }
    let diff = f1.as_matrix().sub(f2.as_matrix())?;
    let fro = diff.frob_norm();
    Ok(fro * fro / f1.order() as f64)
}

/// Combined Siamese loss `(lambda/2)(f1 + f2) + (1 - lambda) q`.
pub fn siamese_loss(f1: f64, f2: f64, q: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must lie in [0, 1]")));
    }
    Ok(lambda / 2.0 * (f1 + f2) + (1.0 - lambda) * q)
}

/// Evaluates trace(C) under each candidate matrix and returns the largest
/// relative deviation from the first candidate's trace.
///
/// For unitary candidates the deviation is a rounding-level number; feeding a
/// non-unitary matrix makes it blow up, which is the point of the check.
pub fn trace_invariance_check(
    h: &ComplexMatrix,
    sigma2: f64,
    candidates: &[ComplexMatrix],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("need at least one candidate matrix".into()));
    }
    let core = error_correlation_core(h, sigma2)?;
    let mut traces = Vec::with_capacity(candidates.len());
    for f in candidates {
        let c = congruence(&core, f)?;
        traces.push(c.trace().re);
    }
    let base = traces[0];
    if base == 0.0 {
        return Err(Error::Degenerate("reference trace is zero".into()));
    }
    Ok(traces
        .iter()
        .map(|t| (t - base).abs() / base.abs())
        .fold(0.0, f64::max))
}
