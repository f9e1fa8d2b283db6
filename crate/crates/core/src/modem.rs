//! Transmit chain, LMMSE equalization, and Monte Carlo BER measurement.
//!
//! A block carries N QPSK symbols: bits map to symbols, the unitary
//! modulation matrix turns symbols into time-domain samples, the channel
//! matrix (whose N + N_g rows embody the zero padding) disperses them, AWGN is
//! added, and the receiver applies full-block LMMSE followed by hard
//! decisions. Single-carrier (identity) and OFDM (unitary DFT) matrices are
//! provided as baselines.
//!
//! # Modulation matrix file format (`UWAF`, version 1, little-endian)
//!
//! magic `"UWAF"`, version `u32` = 1, order N `u32`, then N^2 entries as
//! interleaved (re, im) `f64` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand_core::RngCore;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, ComplexMatrix};
use crate::rng;

const FMATRIX_MAGIC: &[u8; 4] = b"UWAF";
const FMATRIX_VERSION: u32 = 1;

/// Frobenius tolerance for `||F^H F - I||` accepted at construction.
pub const UNITARITY_TOL: f64 = 1e-9;

/// An N x N unitary digital modulation matrix.
///
/// Unitarity is enforced at construction; every instance in the program,
/// whether built, learned, or loaded from a file, satisfies
/// `||F^H F - I||_F < 1e-9`.
#[derive(Debug, Clone)]
pub struct ModulationMatrix {
    matrix: ComplexMatrix,
}

impl ModulationMatrix {
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "modulation matrix must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let residual = matrix.unitarity_residual();
        if !residual.is_finite() || residual >= UNITARITY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix fails unitarity: ||F^H F - I||_F = {residual:e}"
            )));
        }
        Ok(Self { matrix })
    }

    /// Identity modulation (single-carrier transmission).
    pub fn identity(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("modulation order must be at least 2".into()));
        }
        Ok(Self {
            matrix: ComplexMatrix::identity(n),
        })
    }

    /// Unitary DFT modulation (OFDM): entries `exp(-j 2 pi n k / N) / sqrt(N)`.
    pub fn dft(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("modulation order must be at least 2".into()));
        }
        let scale = 1.0 / (n as f64).sqrt();
        let m = ComplexMatrix::from_fn(n, n, |r, c| {
            let angle = -std::f64::consts::TAU * (r as f64) * (c as f64) / n as f64;
            Complex64::from_polar(scale, angle)
        });
        Self::new(m)
    }

    pub fn order(&self) -> usize {
        self.matrix.rows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }
}

/// Gray-maps bit pairs onto QPSK: `(b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)`.
pub fn qpsk_map(bits: &[bool]) -> Result<Vec<Complex64>> {
    if !bits.len().is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "QPSK needs an even bit count, got {}",
            bits.len()
        )));
    }
    let amp = std::f64::consts::FRAC_1_SQRT_2;
    Ok(bits
        .chunks_exact(2)
        .map(|b| {
            Complex64::new(
                if b[0] { -amp } else { amp },
                if b[1] { -amp } else { amp },
            )
        })
        .collect())
}

/// Hard-decision demapping by the signs of the real and imaginary parts.
/// Scale-invariant: any positive scaling of the input leaves the bits alone.
pub fn qpsk_demap(symbols: &[Complex64]) -> Vec<bool> {
    let mut bits = Vec::with_capacity(symbols.len() * 2);
    for s in symbols {
        bits.push(s.re < 0.0);
        bits.push(s.im < 0.0);
    }
    bits
}

/// Applies the modulation matrix: `s = F x`.
pub fn modulate(f: &ModulationMatrix, symbols: &[Complex64]) -> Result<Vec<Complex64>> {
    f.as_matrix().matvec(symbols)
}

/// Adds circular complex Gaussian noise of variance `sigma2` per entry
/// (`sigma2 / 2` per real dimension).
pub fn add_awgn(v: &[Complex64], sigma2: f64, rng: &mut impl RngCore) -> Result<Vec<Complex64>> {
    if !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(Error::InvalidInput(format!("noise variance {sigma2} must be >= 0")));
    }
    if sigma2 == 0.0 {
        return Ok(v.to_vec());
    }
    let scale = (sigma2 / 2.0).sqrt();
    Ok(v.iter()
        .map(|&z| {
            let (g0, g1) = rng::next_normal_pair(rng);
            z + Complex64::new(scale * g0, scale * g1)
        })
        .collect())
}

/// Full-block LMMSE equalization:
/// `x_hat = (H_e^H H_e + sigma2 I)^{-1} H_e^H r`.
pub fn lmmse_equalize(
    h_e: &ComplexMatrix,
    received: &[Complex64],
    sigma2: f64,
) -> Result<Vec<Complex64>> {
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::InvalidInput(format!("noise variance {sigma2} must be > 0")));
    }
    if h_e.rows() != received.len() {
        return Err(Error::DimensionMismatch(format!(
            "channel has {} rows but received vector has {} entries",
            h_e.rows(),
            received.len()
        )));
    }
    let he_h = h_e.hermitian();
    let mut gram = he_h.matmul(h_e)?;
    for i in 0..gram.rows() {
        let d = gram.get(i, i);
        gram.set(i, i, d + Complex64::new(sigma2, 0.0));
    }
    let rhs_vec = he_h.matvec(received)?;
    let rhs = ComplexMatrix::new(rhs_vec.len(), 1, rhs_vec)?;
    let x = hermitian_solve(&gram, &rhs)?;
    Ok((0..x.rows()).map(|i| x.get(i, 0)).collect())
}

/// Precomputed LMMSE weights `W = (H_e^H H_e + sigma2 I)^{-1} H_e^H`, so each
/// trial costs one matrix-vector product.
fn lmmse_weights(h_e: &ComplexMatrix, sigma2: f64) -> Result<ComplexMatrix> {
    let he_h = h_e.hermitian();
    let mut gram = he_h.matmul(h_e)?;
    for i in 0..gram.rows() {
        let d = gram.get(i, i);
        gram.set(i, i, d + Complex64::new(sigma2, 0.0));
    }
    hermitian_solve(&gram, &he_h)
}

fn draw_bits(rng: &mut impl RngCore, count: usize, out: &mut Vec<bool>) {
    out.clear();
    let mut remaining = count;
    while remaining > 0 {
        let mut word = rng.next_u64();
        let take = remaining.min(64);
        for _ in 0..take {
            out.push(word & 1 == 1);
            word >>= 1;
        }
        remaining -= take;
    }
}

/// One Monte Carlo block over the given channel realization: draw bits, map,
/// modulate, pass through the channel, add noise, equalize, demap, and count
/// bit errors. Returns `(bit_errors, bits)`.
pub fn ber_trial(
    f: &ModulationMatrix,
    paths: &crate::channel::PathSet,
    config: &crate::channel::SystemConfig,
    sigma2: f64,
    rng: &mut impl RngCore,
) -> Result<(u64, u64)> {
    let h = crate::channel::build_channel_matrix(paths, config)?;
    let h_e = h.matmul(f.as_matrix())?;
    let n = config.num_subcarriers;
    let mut bits = Vec::with_capacity(2 * n);
    draw_bits(rng, 2 * n, &mut bits);
    let x = qpsk_map(&bits)?;
    let clean = h_e.matvec(&x)?;
    let received = add_awgn(&clean, sigma2, rng)?;
    let x_hat = lmmse_equalize(&h_e, &received, sigma2)?;
    let decided = qpsk_demap(&x_hat);
    let errors = bits
        .iter()
        .zip(&decided)
        .filter(|(a, b)| a != b)
        .count() as u64;
    Ok((errors, 2 * n as u64))
}

/// One row of a BER sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BerPoint {
    pub snr_db: f64,
    pub trials: u64,
    pub bits: u64,
    pub bit_errors: u64,
    pub ber: f64,
}

/// Monte Carlo BER sweep across a dataset.
///
/// For each SNR point (`sigma2 = 10^(-snr/10)`, with ensemble channel power
/// normalized to one) every realization contributes `trials_per_realization`
/// independent blocks. The stream for (snr, realization, trial) is derived
/// from `noise_seed` alone, so sweeps with different modulation matrices see
/// identical bits and noise: comparisons are paired.
pub fn ber_sweep(
    f: &ModulationMatrix,
    dataset: &crate::channel::ChannelDataset,
    snr_list_db: &[f64],
    trials_per_realization: u64,
    noise_seed: u64,
) -> Result<Vec<BerPoint>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("BER sweep needs a nonempty dataset".into()));
    }
    if trials_per_realization == 0 {
        return Err(Error::InvalidInput("trials per realization must be at least 1".into()));
    }
    let n = dataset.config.num_subcarriers;
    if f.order() != n {
        return Err(Error::DimensionMismatch(format!(
            "modulation order {} does not match dataset subcarriers {n}",
            f.order()
        )));
    }

    let mut points = Vec::with_capacity(snr_list_db.len());
    for (si, &snr_db) in snr_list_db.iter().enumerate() {
        let sigma2 = 10f64.powf(-snr_db / 10.0);
        let per_realization: Result<Vec<(u64, u64)>> = dataset
            .realizations
            .par_iter()
            .enumerate()
            .map(|(ri, paths)| {
                let h = crate::channel::build_channel_matrix(paths, &dataset.config)?;
                let h_e = h.matmul(f.as_matrix())?;
                let w = lmmse_weights(&h_e, sigma2)?;
                let mut errors = 0u64;
                let mut bits_total = 0u64;
                let mut bits = Vec::with_capacity(2 * n);
                for trial in 0..trials_per_realization {
                    let mut stream =
                        rng::derived_stream(noise_seed, &[si as u64, ri as u64, trial]);
                    draw_bits(&mut stream, 2 * n, &mut bits);
                    let x = qpsk_map(&bits)?;
                    let clean = h_e.matvec(&x)?;
                    let received = add_awgn(&clean, sigma2, &mut stream)?;
                    let x_hat = w.matvec(&received)?;
                    let decided = qpsk_demap(&x_hat);
                    errors += bits
                        .iter()
                        .zip(&decided)
                        .filter(|(a, b)| a != b)
                        .count() as u64;
                    bits_total += 2 * n as u64;
                }
                Ok((errors, bits_total))
            })
            .collect();
        let per_realization = per_realization?;
        let bit_errors: u64 = per_realization.iter().map(|&(e, _)| e).sum();
        let bits: u64 = per_realization.iter().map(|&(_, b)| b).sum();
        points.push(BerPoint {
            snr_db,
            trials: trials_per_realization * dataset.len() as u64,
            bits,
            bit_errors,
            ber: bit_errors as f64 / bits as f64,
        });
    }
    Ok(points)
}

/// Writes sweep results as CSV with columns snr_db, trials, bits, bit_errors, ber.
pub fn write_ber_csv(points: &[BerPoint], w: &mut impl Write) -> Result<()> {
    writeln!(w, "snr_db,trials,bits,bit_errors,ber")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.snr_db, p.trials, p.bits, p.bit_errors, p.ber
        )?;
    }
    Ok(())
}

/// Saves a modulation matrix in the `UWAF` format.
pub fn save_fmatrix(f: &ModulationMatrix, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FMATRIX_MAGIC)?;
    w.write_all(&FMATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(f.order() as u32).to_le_bytes())?;
    for &z in f.as_matrix().data() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a `UWAF` modulation matrix; the unitarity invariant is re-checked.
pub fn load_fmatrix(path: &Path) -> Result<ModulationMatrix> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != FMATRIX_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want \"UWAF\"")));
    }
    let mut b4 = [0u8; 4];
    read_at(&mut r, &mut b4, &mut offset, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != FMATRIX_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    read_at(&mut r, &mut b4, &mut offset, "order")?;
    let n = u32::from_le_bytes(b4) as usize;
    if n < 2 {
        return Err(Error::format(8, format!("order {n} must be at least 2")));
    }

    let mut data = Vec::with_capacity(n * n);
    let mut b8 = [0u8; 8];
    for i in 0..n * n {
        read_at(&mut r, &mut b8, &mut offset, &format!("entry {i} re"))?;
        let re = f64::from_le_bytes(b8);
        read_at(&mut r, &mut b8, &mut offset, &format!("entry {i} im"))?;
        let im = f64::from_le_bytes(b8);
        data.push(Complex64::new(re, im));
    }
    let matrix = ComplexMatrix::new(n, n, data)
        .map_err(|e| Error::format(12, format!("matrix body: {e}")))?;
    ModulationMatrix::new(matrix)
}

fn read_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    let at = *offset;
    r.read_exact(buf)
        .map_err(|e| Error::format(at, format!("reading {what}: {e}")))?;
    *offset += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{PathParams, PathSet, SystemConfig};
    use crate::rng::substream;
    use proptest::prelude::*;

    fn identity_channel_config(n: usize, guard: usize) -> SystemConfig {
        SystemConfig {
            carrier_freq_hz: 12_500.0,
            bandwidth_hz: 5_000.0,
            num_subcarriers: n,
            guard_len: guard,
            rolloff: 0.65,
            num_paths: 1,
            max_speed_mps: 0.0,
            sound_speed_mps: 1_500.0,
            mean_interarrival_s: 1e-3,
            total_decay_db: 20.0,
        }
    }

    fn trivial_path() -> PathSet {
        PathSet {
            paths: vec![PathParams {
                amplitude: 1.0,
                delay_s: 0.0,
                doppler_scale: 0.0,
            }],
        }
    }

    fn random_unitary(n: usize, seed: u64) -> ModulationMatrix {
        let mut r = substream(seed, 0);
        let a = ComplexMatrix::from_fn(n, n, |_, _| {
            Complex64::new(
                crate::rng::next_f64(&mut r) - 0.5,
                crate::rng::next_f64(&mut r) - 0.5,
            )
        });
        let (q, _) = crate::numerics::householder_qr(&a).unwrap();
        ModulationMatrix::new(q).unwrap()
    }

    #[test]
    fn qpsk_mapping_anchor() {
        let s = qpsk_map(&[false, false]).unwrap();
        let amp = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - Complex64::new(amp, amp)).norm() < 1e-15);
    }

    #[test]
    fn qpsk_sign_decision() {
        let bits = qpsk_demap(&[Complex64::new(-0.3, 0.01)]);
        assert_eq!(bits, vec![true, false]);
    }

    #[test]
    fn qpsk_rejects_odd_bit_count() {
        assert!(qpsk_map(&[true]).is_err());
    }

    #[test]
    fn modulate_identity_and_dft_constant() {
        let n = 8;
        let amp = std::f64::consts::FRAC_1_SQRT_2;
        let x = vec![Complex64::new(amp, amp); n];
        let id = ModulationMatrix::identity(n).unwrap();
        let s = modulate(&id, &x).unwrap();
        assert!(s.iter().zip(&x).all(|(a, b)| (a - b).norm() < 1e-15));

        let dft = ModulationMatrix::dft(n).unwrap();
        let s = modulate(&dft, &x).unwrap();
        let want0 = Complex64::new(amp, amp) * (n as f64).sqrt();
        assert!((s[0] - want0).norm() < 1e-12);
        for v in &s[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn dft_matrix_2x2_and_unitarity() {
        let dft = ModulationMatrix::dft(2).unwrap();
        let amp = std::f64::consts::FRAC_1_SQRT_2;
        let m = dft.as_matrix();
        assert!((m.get(0, 0) - Complex64::new(amp, 0.0)).norm() < 1e-15);
        assert!((m.get(1, 1) - Complex64::new(-amp, 0.0)).norm() < 1e-12);
        assert!(ModulationMatrix::dft(8).unwrap().as_matrix().unitarity_residual() < 1e-12);
        let id = ModulationMatrix::identity(4).unwrap();
        assert!(id.as_matrix().sub(&ComplexMatrix::identity(4)).unwrap().frob_norm() == 0.0);
    }

    #[test]
    fn non_unitary_rejected() {
        let m = ComplexMatrix::identity(4).scale(Complex64::new(0.5, 0.0));
        assert!(ModulationMatrix::new(m).is_err());
    }

    #[test]
    fn modulation_is_isometric() {
        let n = 8;
        let f = random_unitary(n, 3);
        let mut r = substream(4, 0);
        let x: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    crate::rng::next_f64(&mut r) - 0.5,
                    crate::rng::next_f64(&mut r) - 0.5,
                )
            })
            .collect();
        let s = modulate(&f, &x).unwrap();
        let nx: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let ns: f64 = s.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!((nx - ns).abs() < 1e-12);
    }

    #[test]
    fn awgn_zero_variance_is_identity() {
        let v = vec![Complex64::new(1.0, -2.0); 16];
        let mut r = substream(5, 0);
        let out = add_awgn(&v, 0.0, &mut r).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn awgn_variance_and_circularity() {
        let n = 1_000_000;
        let v = vec![Complex64::ZERO; n];
        let mut r = substream(6, 0);
        let out = add_awgn(&v, 0.5, &mut r).unwrap();
        let var: f64 = out.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((var - 0.5).abs() / 0.5 < 0.01, "variance {var}");
        let corr: f64 = out.iter().map(|z| z.re * z.im).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.01 * 0.25, "re/im correlation {corr}");
    }

    #[test]
    fn lmmse_identity_channel_shrinkage() {
        let n = 6;
        let cfg = identity_channel_config(n, 2);
        let h = crate::channel::build_channel_matrix(&trivial_path(), &cfg).unwrap();
        let mut r = substream(7, 0);
        let x: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    crate::rng::next_f64(&mut r) - 0.5,
                    crate::rng::next_f64(&mut r) - 0.5,
                )
            })
            .collect();
        let clean = h.matvec(&x).unwrap();
        let sigma2 = 0.3;
        let x_hat = lmmse_equalize(&h, &clean, sigma2).unwrap();
        for (xh, xi) in x_hat.iter().zip(&x) {
            assert!((xh - xi / (1.0 + sigma2)).norm() < 1e-12);
        }
    }

    #[test]
    fn lmmse_zero_forcing_limit() {
        let n = 5;
        let mut r = substream(8, 0);
        let h_e = ComplexMatrix::from_fn(n + 2, n, |_, _| {
            Complex64::new(
                crate::rng::next_f64(&mut r) - 0.5,
                crate::rng::next_f64(&mut r) - 0.5,
            )
        });
        let x: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    crate::rng::next_f64(&mut r) - 0.5,
                    crate::rng::next_f64(&mut r) - 0.5,
                )
            })
            .collect();
        let clean = h_e.matvec(&x).unwrap();
        let x_hat = lmmse_equalize(&h_e, &clean, 1e-12).unwrap();
        for (xh, xi) in x_hat.iter().zip(&x) {
            assert!((xh - xi).norm() < 1e-6);
        }
    }

    #[test]
    fn lmmse_matches_normal_equations_oracle() {
        let (rows, n) = (12, 8);
        let mut rg = substream(9, 0);
        let h_e = ComplexMatrix::from_fn(rows, n, |_, _| {
            Complex64::new(
                crate::rng::next_f64(&mut rg) - 0.5,
                crate::rng::next_f64(&mut rg) - 0.5,
            )
        });
        let r: Vec<Complex64> = (0..rows)
            .map(|_| {
                Complex64::new(
                    crate::rng::next_f64(&mut rg) - 0.5,
                    crate::rng::next_f64(&mut rg) - 0.5,
                )
            })
            .collect();
        let sigma2 = 0.1;
        let fast = lmmse_equalize(&h_e, &r, sigma2).unwrap();

        // Oracle: explicit Gaussian elimination on the normal equations,
        // written independently of the Cholesky path.
        let heh = h_e.hermitian();
        let mut a = heh.matmul(&h_e).unwrap();
        for i in 0..n {
            let d = a.get(i, i);
            a.set(i, i, d + Complex64::new(sigma2, 0.0));
        }
        let b = heh.matvec(&r).unwrap();
        let mut aug: Vec<Vec<Complex64>> = (0..n)
            .map(|i| {
                let mut row: Vec<Complex64> = (0..n).map(|j| a.get(i, j)).collect();
                row.push(b[i]);
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| {
                    aug[i][col]
                        .norm()
                        .partial_cmp(&aug[j][col].norm())
                        .unwrap()
                })
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for j in col..=n {
                aug[col][j] /= p;
            }
            for i in 0..n {
                if i != col {
                    let factor = aug[i][col];
                    for j in col..=n {
                        let v = aug[col][j];
                        aug[i][j] -= factor * v;
                    }
                }
            }
        }
        for i in 0..n {
            assert!((fast[i] - aug[i][n]).norm() < 1e-10, "entry {i}");
        }
    }

    #[test]
    fn ber_noiseless_identity_channel_is_zero() {
        let n = 8;
        let cfg = identity_channel_config(n, 2);
        let ds = crate::channel::ChannelDataset {
            config: cfg,
            seed: 0,
            realizations: vec![trivial_path()],
        };
        let f = ModulationMatrix::identity(n).unwrap();
        // sigma2 > 0 required; 60 dB SNR makes errors vanishingly unlikely.
        let points = ber_sweep(&f, &ds, &[60.0], 10_000 / (2 * n) as u64, 11).unwrap();
        assert_eq!(points[0].bit_errors, 0);
        assert!(points[0].bits >= 10_000u64 - 2 * n as u64);
    }

    #[test]
    fn ber_trial_counts_all_bits() {
        let n = 8;
        let cfg = identity_channel_config(n, 2);
        let f = ModulationMatrix::identity(n).unwrap();
        let mut r = substream(12, 0);
        let (errors, bits) = ber_trial(&f, &trivial_path(), &cfg, 1.0, &mut r).unwrap();
        assert_eq!(bits, 2 * n as u64);
        assert!(errors <= bits);
    }

    #[test]
    fn dft_and_identity_equivalent_on_identity_channel() {
        // Circular symmetry of the noise makes both unitary schemes identical
        // in distribution; compare at matched Monte Carlo noise floors.
        let n = 16;
        let cfg = identity_channel_config(n, 4);
        let ds = crate::channel::ChannelDataset {
            config: cfg,
            seed: 0,
            realizations: vec![trivial_path()],
        };
        let trials = 6_000u64;
        let id = ber_sweep(&ModulationMatrix::identity(n).unwrap(), &ds, &[4.0], trials, 3).unwrap();
        let df = ber_sweep(&ModulationMatrix::dft(n).unwrap(), &ds, &[4.0], trials, 3).unwrap();
        let p = 0.0565; // Q(sqrt(SNR)) at 4 dB
        let bits = id[0].bits as f64;
        let sd = (p * (1.0 - p) / bits).sqrt();
        assert!((id[0].ber - p).abs() < 4.0 * sd, "identity {}", id[0].ber);
        assert!((df[0].ber - p).abs() < 4.0 * sd, "dft {}", df[0].ber);
    }

    #[test]
    fn ber_sweep_rejects_empty_dataset() {
        let cfg = identity_channel_config(8, 2);
        let ds = crate::channel::ChannelDataset {
            config: cfg,
            seed: 0,
            realizations: vec![],
        };
        let f = ModulationMatrix::identity(8).unwrap();
        assert!(ber_sweep(&f, &ds, &[10.0], 1, 0).is_err());
    }

    #[test]
    fn ber_csv_layout() {
        let points = vec![BerPoint {
            snr_db: 10.0,
            trials: 4,
            bits: 64,
            bit_errors: 3,
            ber: 3.0 / 64.0,
        }];
        let mut buf = Vec::new();
        write_ber_csv(&points, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "snr_db,trials,bits,bit_errors,ber\n10,4,64,3,0.046875\n"
        );
    }

    #[test]
    fn fmatrix_roundtrip_and_corruption() {
        let f = random_unitary(6, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.uwaf");
        save_fmatrix(&f, &path).unwrap();
        let back = load_fmatrix(&path).unwrap();
        assert!(back
            .as_matrix()
            .sub(f.as_matrix())
            .unwrap()
            .frob_norm()
            == 0.0);

        let bad = dir.path().join("bad.uwaf");
        std::fs::write(&bad, b"UWAFxxxx").unwrap();
        assert!(matches!(load_fmatrix(&bad), Err(Error::Format { .. })));

        // Valid container holding a non-unitary matrix: rejected on load.
        let scaled = ComplexMatrix::identity(6).scale(Complex64::new(0.5, 0.0));
        let fake = dir.path().join("scaled.uwaf");
        {
            use std::io::Write as _;
            let mut w = BufWriter::new(File::create(&fake).unwrap());
            w.write_all(b"UWAF").unwrap();
            w.write_all(&1u32.to_le_bytes()).unwrap();
            w.write_all(&6u32.to_le_bytes()).unwrap();
            for z in scaled.data() {
                w.write_all(&z.re.to_le_bytes()).unwrap();
                w.write_all(&z.im.to_le_bytes()).unwrap();
            }
        }
        assert!(matches!(load_fmatrix(&fake), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn qpsk_roundtrip(bits in proptest::collection::vec(any::<bool>(), 2..64)) {
            let mut bits = bits;
            if bits.len() % 2 == 1 {
                bits.pop();
            }
            let symbols = qpsk_map(&bits).unwrap();
            prop_assert_eq!(qpsk_demap(&symbols), bits);
        }

        #[test]
        fn demap_scale_invariance(re in -2.0f64..2.0, im in -2.0f64..2.0, alpha in 0.01f64..100.0) {
            let z = Complex64::new(re, im);
            prop_assert_eq!(qpsk_demap(&[z]), qpsk_demap(&[z * alpha]));
        }
    }
}
