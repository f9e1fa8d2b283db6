//! Unitary modulation design for underwater acoustic multicarrier links.
//!
//! The crate simulates a zero-padded multicarrier system over wideband
//! delay-scale underwater channels, equalized with full-block LMMSE, and
//! learns the N x N unitary digital modulation matrix with a Siamese-trained
//! fully-connected network whose output is projected onto the unitary
//! manifold by a QR head. Monte Carlo BER sweeps validate the learned
//! modulation against single-carrier (identity) and OFDM (DFT) baselines.
//!
//! Modules:
//! - [`numerics`]: dense complex matrices, Cholesky solves, Householder QR.
//! - [`rng`]: pinned ChaCha12 substreams for reproducible experiments.
//! - [`channel`]: stochastic delay-scale channel model and dataset files.
//! - [`modem`]: QPSK, modulation, AWGN, LMMSE equalization, BER sweeps.
//! - [`objective`]: LMMSE error statistics and the fairness/consistency loss.
//! - [`siamese`]: the network, its analytic gradients, Adam, and training.

#![allow(clippy::needless_range_loop)]

pub mod channel;
pub mod error;
pub mod modem;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod siamese;

pub use error::{Error, Result};
pub use numerics::ComplexMatrix;
