//! Run configuration: one TOML file describes a whole experiment.
//!
//! The file carries three sections. `[system]` is the physical and block
//! geometry, `[train]` the dataset sizes and training hyper-parameters,
//! `[eval]` the BER sweep settings. Every field has a default mirroring the
//! reference setup (12.5 kHz carrier, 5 kHz bandwidth, 256 subcarriers with a
//! 64-sample guard, 8 paths, QPSK, 20000/1000 train/test channels); unknown
//! keys are rejected so typos fail loudly instead of silently using defaults.

use serde::Deserialize;
use std::path::Path;

use uwamod::channel::SystemConfig;
use uwamod::error::{Error, Result};
use uwamod::siamese::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub num_subcarriers: usize,
    pub guard_len: usize,
    pub rolloff: f64,
    pub num_paths: usize,
    /// Maximum relative speed in m/s (the default equals 20 knots).
    pub max_speed_mps: f64,
    pub sound_speed_mps: f64,
    pub mean_interarrival_s: f64,
    pub total_decay_db: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 12_500.0,
            bandwidth_hz: 5_000.0,
            num_subcarriers: 256,
            guard_len: 64,
            rolloff: 0.65,
            num_paths: 8,
            max_speed_mps: 20.0 * 0.514_444,
            sound_speed_mps: 1_500.0,
            mean_interarrival_s: 1e-3,
            total_decay_db: 20.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Training dataset size used by gen-dataset when --count is absent.
    pub m_train: usize,
    /// Test dataset size, for the paired gen-dataset call.
    pub m_test: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub samples_per_batch: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// SNR (dB) whose noise variance enters the training loss.
    pub train_snr_db: f64,
    pub seed: u64,
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            m_train: 20_000,
            m_test: 1_000,
            epochs: 2_500,
            batches_per_epoch: 50,
            samples_per_batch: 200,
            lambda: 0.005,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            train_snr_db: 15.0,
            seed: 1,
            patience: 25,
            min_rel_improvement: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// SNR grid in dB for BER sweeps.
    pub snr_db: Vec<f64>,
    pub trials_per_realization: u64,
    /// Seed for bits and noise; sweeps sharing it are paired across schemes.
    pub noise_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            trials_per_realization: 1,
            noise_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system_config().validate()?;
        self.train_config().validate()?;
        if self.train.m_train == 0 || self.train.m_test < 2 {
            return Err(Error::invalid_config(
                "train.m_train/m_test",
                "need m_train >= 1 and m_test >= 2",
            ));
        }
        if self.eval.snr_db.is_empty() {
            return Err(Error::invalid_config("eval.snr_db", "need at least one SNR point"));
        }
        if self.eval.trials_per_realization == 0 {
            return Err(Error::invalid_config(
                "eval.trials_per_realization",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn system_config(&self) -> SystemConfig {
        let s = &self.system;
        SystemConfig {
            carrier_freq_hz: s.carrier_freq_hz,
            bandwidth_hz: s.bandwidth_hz,
            num_subcarriers: s.num_subcarriers,
            guard_len: s.guard_len,
            rolloff: s.rolloff,
            num_paths: s.num_paths,
            max_speed_mps: s.max_speed_mps,
            sound_speed_mps: s.sound_speed_mps,
            mean_interarrival_s: s.mean_interarrival_s,
            total_decay_db: s.total_decay_db,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            samples_per_batch: t.samples_per_batch,
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            sigma2: 10f64.powf(-t.train_snr_db / 10.0),
            seed: t.seed,
            patience: t.patience,
            min_rel_improvement: t.min_rel_improvement,
        }
    }
}
