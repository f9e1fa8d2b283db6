//! Training loop, Adam optimizer, checkpoints, and the training log.
//!
//! An epoch shuffles the training set once and walks it in disjoint pairs, so
//! every channel is visited exactly once per epoch. Within a batch the
//! sampling iterations are independent given the frozen weights; they are
//! evaluated in fixed-size chunks whose partial gradients are reduced in
//! iteration order, which makes parallel and sequential runs bit-identical.
//! One Adam update is applied per batch to the plain sum of the stored
//! gradients.
//!
//! # Checkpoint file format (`UWAT`, version 1, little-endian)
//!
//! magic `"UWAT"`, version `u32`, N `u32`, N_g `u32`, the full training
//! configuration, the step counter `u64`, then weights, first moments, and
//! second moments as `f64` arrays in declared layer order (each layer's
//! weight matrix row-major, then its bias), followed by the batch log and the
//! per-epoch test-loss and consistency histories. Files are written to a
//! sibling temporary path and renamed into place.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::channel::{build_channel_matrix, ChannelDataset};
use crate::error::{Error, Result};
use crate::modem::ModulationMatrix;
use crate::numerics::{householder_qr, ComplexMatrix};
use crate::objective;
use crate::rng;

use super::{forward, layer_dims, loss_and_gradient, NetworkWeights};

const CHECKPOINT_MAGIC: &[u8; 4] = b"UWAT";
const CHECKPOINT_VERSION: u32 = 1;

/// Iterations accumulated per reduction chunk. Fixed, so the reduction order
/// does not depend on the worker count.
const GRAD_CHUNK: usize = 16;

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Maximum number of epochs E.
    pub epochs: usize,
    /// Batches per epoch B.
    pub batches_per_epoch: usize,
    /// Sampling iterations per batch; each consumes one disjoint channel pair.
    pub samples_per_batch: usize,
    /// Loss mixing weight lambda in [0, 1].
    pub lambda: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Noise variance used inside the training loss.
    pub sigma2: f64,
    pub seed: u64,
    /// Epochs without sufficient test-loss improvement before stopping.
    pub patience: usize,
    /// Relative improvement that resets the patience counter.
    pub min_rel_improvement: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid_config("epochs", "must be at least 1"));
        }
        if self.batches_per_epoch < 1 {
            return Err(Error::invalid_config("batches_per_epoch", "must be at least 1"));
        }
        if self.samples_per_batch < 1 {
            return Err(Error::invalid_config("samples_per_batch", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid_config("lambda", "must lie in [0, 1]"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid_config("learning_rate", "must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid_config(name, "must lie in [0, 1)"));
            }
        }
        if !self.adam_epsilon.is_finite() || self.adam_epsilon <= 0.0 {
            return Err(Error::invalid_config("adam_epsilon", "must be positive"));
        }
        if !self.sigma2.is_finite() || self.sigma2 <= 0.0 {
            return Err(Error::invalid_config("sigma2", "must be positive"));
        }
        if self.patience < 1 {
            return Err(Error::invalid_config("patience", "must be at least 1"));
        }
        if !self.min_rel_improvement.is_finite() || self.min_rel_improvement < 0.0 {
            return Err(Error::invalid_config("min_rel_improvement", "must be nonnegative"));
        }
        Ok(())
    }
}

/// One row of the training log (one batch).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean per-iteration loss within the batch.
    pub train_loss: f64,
    /// Mean fairness component (average of the two branches).
    pub f_term: f64,
    /// Mean output-consistency component.
    pub q_term: f64,
    /// Test loss, present on the last batch of each epoch.
    pub test_loss: Option<f64>,
    /// Seconds since the run started. Informational only; excluded from
    /// determinism comparisons.
    pub wall_seconds: f64,
}

/// Mutable training state: weights, Adam moments, step counter, histories.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: NetworkWeights,
    pub adam_m: NetworkWeights,
    pub adam_v: NetworkWeights,
    pub step: u64,
    pub log: Vec<BatchRecord>,
    /// Test loss at the end of each completed epoch.
    pub test_loss_history: Vec<f64>,
    /// Consistency statistic mean_m q(F_m, F) at the end of each epoch.
    pub consistency_history: Vec<f64>,
}

impl TrainState {
    /// Fresh state with fan-in initialized weights and zeroed moments.
    pub fn new(num_subcarriers: usize, guard_len: usize, seed: u64) -> Self {
        let mut init_rng = rng::derived_stream(seed, &[u64::from(u32::MAX)]);
        let weights = NetworkWeights::init(num_subcarriers, guard_len, &mut init_rng);
        let adam_m = NetworkWeights::zeros(num_subcarriers, guard_len);
        let adam_v = NetworkWeights::zeros(num_subcarriers, guard_len);
        Self {
            weights,
            adam_m,
            adam_v,
            step: 0,
            log: Vec::new(),
            test_loss_history: Vec::new(),
            consistency_history: Vec::new(),
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.test_loss_history.len()
    }
}

/// One Adam update from an accumulated (summed) batch gradient.
///
/// Standard bias-corrected Adam; the learning rate applies to the summed
/// gradient, matching a per-batch update of stored per-iteration gradients.
/// A non-finite gradient aborts training with a diagnostic.
pub fn adam_step(state: &mut TrainState, grad: &NetworkWeights, cfg: &TrainConfig) -> Result<()> {
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at step {} is not finite; training aborted",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for li in 0..state.weights.layers.len() {
        let w = &mut state.weights.layers[li];
        let m = &mut state.adam_m.layers[li];
        let v = &mut state.adam_v.layers[li];
        let g = &grad.layers[li];
        for ((wv, mv), (vv, gv)) in w
            .weights
            .iter_mut()
            .zip(m.weights.iter_mut())
            .zip(v.weights.iter_mut().zip(g.weights.iter()))
        {
            *mv = cfg.adam_beta1 * *mv + (1.0 - cfg.adam_beta1) * gv;
            *vv = cfg.adam_beta2 * *vv + (1.0 - cfg.adam_beta2) * gv * gv;
            *wv -= cfg.learning_rate * (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.adam_epsilon);
        }
        for ((wv, mv), (vv, gv)) in w
            .bias
            .iter_mut()
            .zip(m.bias.iter_mut())
            .zip(v.bias.iter_mut().zip(g.bias.iter()))
        {
            *mv = cfg.adam_beta1 * *mv + (1.0 - cfg.adam_beta1) * gv;
            *vv = cfg.adam_beta2 * *vv + (1.0 - cfg.adam_beta2) * gv * gv;
            *wv -= cfg.learning_rate * (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// End-of-epoch statistics over the test set.
#[derive(Debug, Clone)]
pub struct TestStats {
    /// Mean Siamese loss over consecutive test pairs.
    pub test_loss: f64,
    /// mean_m q(F_m, F) where F is the QR projection of the averaged output.
    pub consistency: f64,
    /// The averaged-and-projected modulation matrix.
    pub modulation: ModulationMatrix,
}

fn forward_outputs(weights: &NetworkWeights, dataset: &ChannelDataset) -> Result<Vec<ComplexMatrix>> {
    dataset
        .realizations
        .par_iter()
        .map(|paths| {
            let h = build_channel_matrix(paths, &dataset.config)?;
            let (f, _) = forward(weights, &h)?;
            Ok(f.into_matrix())
        })
        .collect()
}

fn project_average(outputs: &[ComplexMatrix]) -> Result<(ModulationMatrix, f64)> {
    let n = outputs[0].rows();
    let mut mean = ComplexMatrix::zeros(n, n);
    for f in outputs {
        mean = mean.add(f)?;
    }
    let mean = mean.scale(num_complex::Complex64::new(1.0 / outputs.len() as f64, 0.0));
    let (q, _) = householder_qr(&mean)?;
    let modulation = ModulationMatrix::new(q)?;
    let mut consistency = 0.0;
    for f in outputs {
        let d = f.sub(modulation.as_matrix())?.frob_norm();
        consistency += d * d / n as f64;
    }
    Ok((modulation, consistency / outputs.len() as f64))
}

/// Evaluates the loss and the output-consistency statistic on the test set.
pub fn test_statistics(
    weights: &NetworkWeights,
    test_set: &ChannelDataset,
    sigma2: f64,
    lambda: f64,
) -> Result<TestStats> {
    if test_set.len() < 2 {
        return Err(Error::InvalidInput("test set needs at least 2 realizations".into()));
    }
    let outputs = forward_outputs(weights, test_set)?;
    let fairness: Vec<f64> = test_set
        .realizations
        .par_iter()
        .zip(&outputs)
        .map(|(paths, f)| {
            let h = build_channel_matrix(paths, &test_set.config)?;
            let core = objective::error_correlation_core(&h, sigma2)?;
            let c = f.hermitian().matmul(&core.matmul(f)?)?;
            let profile = objective::mse_profile(&c)?;
            let target = objective::optimal_profile(&c)?;
            objective::fairness_objective(&profile, &target)
        })
        .collect::<Result<_>>()?;

    let n = test_set.config.num_subcarriers as f64;
    let pairs = outputs.len() / 2;
    let mut loss_sum = 0.0;
    for p in 0..pairs {
        let (a, b) = (2 * p, 2 * p + 1);
        let d = outputs[a].sub(&outputs[b])?.frob_norm();
        let q = d * d / n;
        loss_sum += lambda / 2.0 * (fairness[a] + fairness[b]) + (1.0 - lambda) * q;
    }
    let (modulation, consistency) = project_average(&outputs)?;
    Ok(TestStats {
        test_loss: loss_sum / pairs as f64,
        consistency,
        modulation,
    })
}

/// Runs forward on every test channel, averages the outputs, and projects the
/// average back onto the unitary manifold with QR. Returns the final
/// modulation and the consistency statistic mean_m q(F_m, F).
pub fn finalize_modulation(
    state: &TrainState,
    test_set: &ChannelDataset,
) -> Result<(ModulationMatrix, f64)> {
    if test_set.is_empty() {
        return Err(Error::InvalidInput("test set is empty".into()));
    }
    let outputs = forward_outputs(&state.weights, test_set)?;
    project_average(&outputs)
}

fn early_stop(history: &[f64], patience: usize, min_rel_improvement: f64) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for &loss in history {
        if loss < best * (1.0 - min_rel_improvement) || best.is_infinite() {
            best = best.min(loss);
            stale = 0;
        } else {
            best = best.min(loss);
            stale += 1;
        }
        if stale >= patience {
            return true;
        }
    }
    false
}

/// Trains from a fresh fan-in initialization.
pub fn train(
    train_set: &ChannelDataset,
    test_set: &ChannelDataset,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let state = TrainState::new(
        train_set.config.num_subcarriers,
        train_set.config.guard_len,
        cfg.seed,
    );
    train_from(state, train_set, test_set, cfg)
}

/// Continues training from an existing state (fresh or checkpointed).
pub fn train_from(
    mut state: TrainState,
    train_set: &ChannelDataset,
    test_set: &ChannelDataset,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    let n = train_set.config.num_subcarriers;
    let guard = train_set.config.guard_len;
    if test_set.config.num_subcarriers != n || test_set.config.guard_len != guard {
        return Err(Error::Mismatch(format!(
            "test set geometry {}+{} differs from training geometry {}+{}",
            test_set.config.num_subcarriers, test_set.config.guard_len, n, guard
        )));
    }
    if state.weights.num_subcarriers != n || state.weights.guard_len != guard {
        return Err(Error::Mismatch(format!(
            "state geometry {}+{} differs from dataset geometry {}+{}",
            state.weights.num_subcarriers, state.weights.guard_len, n, guard
        )));
    }
    let needed = 2 * cfg.batches_per_epoch * cfg.samples_per_batch;
    if needed > train_set.len() {
        return Err(Error::invalid_config(
            "samples_per_batch",
            format!(
                "an epoch consumes 2*B*N_sample = {needed} channels but the training set has {}",
                train_set.len()
            ),
        ));
    }
    if test_set.len() < 2 {
        return Err(Error::InvalidInput("test set needs at least 2 realizations".into()));
    }

    let started = Instant::now();
    let start_epoch = state.epochs_completed() + 1;
    for epoch in start_epoch..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = rng::derived_stream(cfg.seed, &[1, epoch as u64]);
        rng::shuffle(&mut shuffle_rng, &mut order);

        for batch in 1..=cfg.batches_per_epoch {
            let base = (batch - 1) * cfg.samples_per_batch;
            let pairs: Vec<(usize, usize)> = (0..cfg.samples_per_batch)
                .map(|it| {
                    let at = 2 * (base + it);
                    (order[at], order[at + 1])
                })
                .collect();

            // Fixed-size chunks, each reduced sequentially, then summed in
            // chunk order: bit-identical for any worker count.
            let chunk_results: Vec<Result<(NetworkWeights, f64, f64, f64)>> = pairs
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut acc = NetworkWeights::zeros(n, guard);
                    let (mut loss, mut f_sum, mut q_sum) = (0.0, 0.0, 0.0);
                    for &(ia, ib) in chunk {
                        let h1 =
                            build_channel_matrix(&train_set.realizations[ia], &train_set.config)?;
                        let h2 =
                            build_channel_matrix(&train_set.realizations[ib], &train_set.config)?;
                        let (terms, grad) =
                            loss_and_gradient(&state.weights, &h1, &h2, cfg.sigma2, cfg.lambda)?;
                        acc.add_assign(&grad);
                        loss += terms.loss;
                        f_sum += 0.5 * (terms.fairness[0] + terms.fairness[1]);
                        q_sum += terms.distance;
                    }
                    Ok((acc, loss, f_sum, q_sum))
                })
                .collect();

            let mut batch_grad = NetworkWeights::zeros(n, guard);
            let (mut loss, mut f_sum, mut q_sum) = (0.0, 0.0, 0.0);
            for res in chunk_results {
                let (g, l, f, q) = res?;
                batch_grad.add_assign(&g);
                loss += l;
                f_sum += f;
                q_sum += q;
            }
            adam_step(&mut state, &batch_grad, cfg)?;

            let iters = cfg.samples_per_batch as f64;
            state.log.push(BatchRecord {
                epoch,
                batch,
                train_loss: loss / iters,
                f_term: f_sum / iters,
                q_term: q_sum / iters,
                test_loss: None,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
        }

        let stats = test_statistics(&state.weights, test_set, cfg.sigma2, cfg.lambda)?;
        state.test_loss_history.push(stats.test_loss);
        state.consistency_history.push(stats.consistency);
        if let Some(last) = state.log.last_mut() {
            last.test_loss = Some(stats.test_loss);
            last.wall_seconds = started.elapsed().as_secs_f64();
        }
        log::info!(
            "epoch {epoch}: train_loss {:.6e} test_loss {:.6e} consistency {:.6e}",
            state.log.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
            stats.test_loss,
            stats.consistency
        );

        if early_stop(&state.test_loss_history, cfg.patience, cfg.min_rel_improvement) {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    Ok(state)
}

/// Writes the training log as CSV with the columns
/// `epoch,batch,train_loss,f_term,q_term,test_loss,wall_seconds`.
/// `test_loss` is empty except on the last batch of each epoch.
pub fn write_training_log(rows: &[BatchRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,batch,train_loss,f_term,q_term,test_loss,wall_seconds")?;
    for r in rows {
        let test = r.test_loss.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.epoch, r.batch, r.train_loss, r.f_term, r.q_term, test, r.wall_seconds
        )?;
    }
    Ok(())
}

/// A checkpoint: everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub num_subcarriers: usize,
    pub guard_len: usize,
    pub config: TrainConfig,
    pub state: TrainState,
}

fn write_weights(w: &mut impl Write, net: &NetworkWeights) -> Result<()> {
    for layer in &net.layers {
        for v in &layer.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Saves a checkpoint with write-then-rename semantics.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("uwat.tmp");
    {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(ck.num_subcarriers as u32).to_le_bytes())?;
        w.write_all(&(ck.guard_len as u32).to_le_bytes())?;
        let c = &ck.config;
        w.write_all(&(c.epochs as u32).to_le_bytes())?;
        w.write_all(&(c.batches_per_epoch as u32).to_le_bytes())?;
        w.write_all(&(c.samples_per_batch as u32).to_le_bytes())?;
        w.write_all(&c.lambda.to_le_bytes())?;
        w.write_all(&c.learning_rate.to_le_bytes())?;
        w.write_all(&c.adam_beta1.to_le_bytes())?;
        w.write_all(&c.adam_beta2.to_le_bytes())?;
        w.write_all(&c.adam_epsilon.to_le_bytes())?;
        w.write_all(&c.sigma2.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&(c.patience as u32).to_le_bytes())?;
        w.write_all(&c.min_rel_improvement.to_le_bytes())?;
        w.write_all(&ck.state.step.to_le_bytes())?;
        write_weights(&mut w, &ck.state.weights)?;
        write_weights(&mut w, &ck.state.adam_m)?;
        write_weights(&mut w, &ck.state.adam_v)?;
        w.write_all(&(ck.state.log.len() as u32).to_le_bytes())?;
        for r in &ck.state.log {
            w.write_all(&(r.epoch as u32).to_le_bytes())?;
            w.write_all(&(r.batch as u32).to_le_bytes())?;
            w.write_all(&r.train_loss.to_le_bytes())?;
            w.write_all(&r.f_term.to_le_bytes())?;
            w.write_all(&r.q_term.to_le_bytes())?;
            w.write_all(&[r.test_loss.is_some() as u8])?;
            w.write_all(&r.test_loss.unwrap_or(0.0).to_le_bytes())?;
            w.write_all(&r.wall_seconds.to_le_bytes())?;
        }
        w.write_all(&(ck.state.test_loss_history.len() as u32).to_le_bytes())?;
        for v in &ck.state.test_loss_history {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(ck.state.consistency_history.len() as u32).to_le_bytes())?;
        for v in &ck.state.consistency_history {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct CkReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CkReader<R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(at, format!("reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, what)?;
        Ok(b[0])
    }

    fn weights(&mut self, n: usize, guard: usize) -> Result<NetworkWeights> {
        let mut net = NetworkWeights::zeros(n, guard);
        for (li, (in_dim, out_dim)) in layer_dims(n, guard).into_iter().enumerate() {
            let layer = &mut net.layers[li];
            for i in 0..in_dim * out_dim {
                layer.weights[i] = self.f64("layer weight")?;
            }
            for i in 0..out_dim {
                layer.bias[i] = self.f64("layer bias")?;
            }
        }
        Ok(net)
    }
}

/// Loads a `UWAT` checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = CkReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want \"UWAT\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32("num_subcarriers")? as usize;
    let guard = r.u32("guard_len")? as usize;
    let config = TrainConfig {
        epochs: r.u32("epochs")? as usize,
        batches_per_epoch: r.u32("batches_per_epoch")? as usize,
        samples_per_batch: r.u32("samples_per_batch")? as usize,
        lambda: r.f64("lambda")?,
        learning_rate: r.f64("learning_rate")?,
        adam_beta1: r.f64("adam_beta1")?,
        adam_beta2: r.f64("adam_beta2")?,
        adam_epsilon: r.f64("adam_epsilon")?,
        sigma2: r.f64("sigma2")?,
        seed: r.u64("seed")?,
        patience: r.u32("patience")? as usize,
        min_rel_improvement: r.f64("min_rel_improvement")?,
    };
    let step = r.u64("step")?;
    let weights = r.weights(n, guard)?;
    let adam_m = r.weights(n, guard)?;
    let adam_v = r.weights(n, guard)?;
    let log_len = r.u32("log length")? as usize;
    let mut log = Vec::with_capacity(log_len);
    for _ in 0..log_len {
        let epoch = r.u32("log epoch")? as usize;
        let batch = r.u32("log batch")? as usize;
        let train_loss = r.f64("log train_loss")?;
        let f_term = r.f64("log f_term")?;
        let q_term = r.f64("log q_term")?;
        let has_test = r.u8("log has_test")? != 0;
        let test = r.f64("log test_loss")?;
        let wall_seconds = r.f64("log wall")?;
        log.push(BatchRecord {
            epoch,
            batch,
            train_loss,
            f_term,
            q_term,
            test_loss: has_test.then_some(test),
            wall_seconds,
        });
    }
    let tl_len = r.u32("test history length")? as usize;
    let mut test_loss_history = Vec::with_capacity(tl_len);
    for _ in 0..tl_len {
        test_loss_history.push(r.f64("test history")?);
    }
    let ch_len = r.u32("consistency history length")? as usize;
    let mut consistency_history = Vec::with_capacity(ch_len);
    for _ in 0..ch_len {
        consistency_history.push(r.f64("consistency history")?);
    }

    Ok(Checkpoint {
        num_subcarriers: n,
        guard_len: guard,
        config,
        state: TrainState {
            weights,
            adam_m,
            adam_v,
            step,
            log,
            test_loss_history,
            consistency_history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::channel::generate_dataset;

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batches_per_epoch: 2,
            samples_per_batch: 3,
            lambda: 0.1,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            sigma2: 0.1,
            seed: 5,
            patience: 10,
            min_rel_improvement: 1e-4,
        }
    }

    #[test]
    fn adam_zero_gradient_from_rest_is_noop() {
        let mut state = TrainState::new(3, 1, 1);
        let before = state.weights.clone();
        let grad = NetworkWeights::zeros(3, 1);
        adam_step(&mut state, &grad, &desk_cfg()).unwrap();
        assert_eq!(state.weights, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_a_bias_corrected_sign_step() {
        // Scalar trace: for g >> eps the first update is -lr * sign(g).
        let mut state = TrainState::new(2, 1, 2);
        let mut grad = NetworkWeights::zeros(2, 1);
        *grad.param_mut(0) = 3.0;
        let cfg = desk_cfg();
        let w0 = {
            let mut v = Vec::new();
            state.weights.for_each_param(|x| v.push(x));
            v[0]
        };
        adam_step(&mut state, &grad, &cfg).unwrap();
        let w1 = {
            let mut v = Vec::new();
            state.weights.for_each_param(|x| v.push(x));
            v[0]
        };
        let update = w1 - w0;
        assert!(
            (update + cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate + 1e-12,
            "update {update}"
        );
    }

    #[test]
    fn adam_matches_scalar_reference_two_steps() {
        // Independent scalar Adam, equal-magnitude opposite-sign gradients.
        let cfg = desk_cfg();
        let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon, cfg.learning_rate);
        let gs = [2.0, -2.0];
        let (mut m, mut v, mut w_ref) = (0.0, 0.0, 0.0);
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let mut state = TrainState::new(2, 1, 3);
        let w0 = {
            let mut out = Vec::new();
            state.weights.for_each_param(|x| out.push(x));
            out[0]
        };
        for g in gs {
            let mut grad = NetworkWeights::zeros(2, 1);
            *grad.param_mut(0) = g;
            adam_step(&mut state, &grad, &cfg).unwrap();
        }
        let w2 = {
            let mut out = Vec::new();
            state.weights.for_each_param(|x| out.push(x));
            out[0]
        };
        assert!(((w2 - w0) - w_ref).abs() < 1e-15, "got {} want {w_ref}", w2 - w0);
        // Second moment is symmetric in the sign of g.
        let mut vs = Vec::new();
        state.adam_v.for_each_param(|x| vs.push(x));
        assert!((vs[0] - v).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = TrainState::new(2, 1, 4);
        let mut grad = NetworkWeights::zeros(2, 1);
        *grad.param_mut(1) = f64::NAN;
        assert!(matches!(
            adam_step(&mut state, &grad, &desk_cfg()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn minimal_training_run_completes() {
        let cfg_sys = tiny_config(4, 1);
        let train_set = generate_dataset(&cfg_sys, 10, 12).unwrap();
        let test_set = generate_dataset(&cfg_sys, 11, 4).unwrap();
        let mut tc = desk_cfg();
        tc.epochs = 1;
        tc.batches_per_epoch = 1;
        tc.samples_per_batch = 1;
        let state = train(&train_set, &test_set, &tc).unwrap();
        assert_eq!(state.log.len(), 1);
        assert_eq!(state.test_loss_history.len(), 1);
        assert!(state.log[0].test_loss.is_some());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg_sys = tiny_config(4, 1);
        let train_set = generate_dataset(&cfg_sys, 20, 12).unwrap();
        let test_set = generate_dataset(&cfg_sys, 21, 4).unwrap();
        let tc = desk_cfg();
        let a = train(&train_set, &test_set, &tc).unwrap();
        let b = train(&train_set, &test_set, &tc).unwrap();
        assert_eq!(a.weights, b.weights);
        let rows_a: Vec<_> = a.log.iter().map(|r| (r.epoch, r.batch, r.train_loss.to_bits())).collect();
        let rows_b: Vec<_> = b.log.iter().map(|r| (r.epoch, r.batch, r.train_loss.to_bits())).collect();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn sequential_pool_matches_default_pool() {
        let cfg_sys = tiny_config(4, 1);
        let train_set = generate_dataset(&cfg_sys, 30, 40).unwrap();
        let test_set = generate_dataset(&cfg_sys, 31, 4).unwrap();
        let mut tc = desk_cfg();
        tc.epochs = 1;
        tc.batches_per_epoch = 1;
        tc.samples_per_batch = 20; // crosses a chunk boundary
        let parallel = train(&train_set, &test_set, &tc).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let sequential = pool.install(|| train(&train_set, &test_set, &tc)).unwrap();
        assert_eq!(parallel.weights, sequential.weights);
        assert_eq!(
            parallel.test_loss_history[0].to_bits(),
            sequential.test_loss_history[0].to_bits()
        );
    }

    #[test]
    fn pure_consistency_training_drives_q_down() {
        // lambda = 0 leaves only the disagreement term; its epoch average
        // must fall as the network converges to one output.
        let cfg_sys = tiny_config(8, 2);
        let train_set = generate_dataset(&cfg_sys, 70, 200).unwrap();
        let test_set = generate_dataset(&cfg_sys, 71, 8).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            batches_per_epoch: 2,
            samples_per_batch: 50,
            lambda: 0.0,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            sigma2: 10f64.powf(-1.5),
            seed: 72,
            patience: 100,
            min_rel_improvement: 0.0,
        };
        let state = train(&train_set, &test_set, &tc).unwrap();
        let epoch_q = |e: usize| -> f64 {
            let rows: Vec<&BatchRecord> = state.log.iter().filter(|r| r.epoch == e).collect();
            rows.iter().map(|r| r.q_term).sum::<f64>() / rows.len() as f64
        };
        let (q1, q10) = (epoch_q(1), epoch_q(10));
        assert!(
            q10 < q1,
            "epoch-averaged q did not fall: epoch 1 {q1:e}, epoch 10 {q10:e}"
        );
    }

    #[test]
    fn exhaustion_is_rejected_up_front() {
        let cfg_sys = tiny_config(4, 1);
        let train_set = generate_dataset(&cfg_sys, 40, 5).unwrap();
        let test_set = generate_dataset(&cfg_sys, 41, 4).unwrap();
        let tc = desk_cfg(); // needs 2*2*3 = 12 > 5
        assert!(matches!(
            train(&train_set, &test_set, &tc),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_continuity() {
        let cfg_sys = tiny_config(4, 1);
        let train_set = generate_dataset(&cfg_sys, 50, 12).unwrap();
        let test_set = generate_dataset(&cfg_sys, 51, 4).unwrap();
        let mut tc = desk_cfg();
        tc.epochs = 1;
        let state = train(&train_set, &test_set, &tc).unwrap();
        let steps_before = state.step;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.uwat");
        let ck = Checkpoint {
            num_subcarriers: 4,
            guard_len: 1,
            config: tc.clone(),
            state,
        };
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.state.weights, ck.state.weights);
        assert_eq!(loaded.state.step, steps_before);
        assert_eq!(loaded.config, tc);

        let mut tc2 = tc.clone();
        tc2.epochs = 2;
        let resumed = train_from(loaded.state, &train_set, &test_set, &tc2).unwrap();
        assert!(resumed.step > steps_before);
        assert_eq!(resumed.test_loss_history.len(), 2);
        let epochs: Vec<usize> = resumed.log.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn finalize_on_identical_outputs_returns_them() {
        // When every F_m is the same unitary, the average projects back to it.
        let state = TrainState::new(4, 1, 60);
        let cfg_sys = tiny_config(4, 1);
        let one = generate_dataset(&cfg_sys, 61, 1).unwrap();
        let mut test_set = one.clone();
        test_set.realizations = vec![one.realizations[0].clone(), one.realizations[0].clone()];
        let (f, consistency) = finalize_modulation(&state, &test_set).unwrap();
        let h = build_channel_matrix(&test_set.realizations[0], &cfg_sys).unwrap();
        let (direct, _) = forward(&state.weights, &h).unwrap();
        assert!(f.as_matrix().sub(direct.as_matrix()).unwrap().frob_norm() < 1e-10);
        assert!(consistency < 1e-20);
    }

    #[test]
    fn finalize_average_matches_hand_computation() {
        // Two hand-constructed 2x2 unitaries: average then QR, checked
        // against the closed-form result. Averaging I with diag(1, -1) would
        // be singular, so a small rotation is used instead.
        let theta: f64 = 0.3;
        let f1 = ComplexMatrix::from_fn(2, 2, |r, c| {
            let v = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]][r][c];
            num_complex::Complex64::new(v, 0.0)
        });
        let f2 = ComplexMatrix::identity(2);
        let mean = f1.add(&f2).unwrap().scale(num_complex::Complex64::new(0.5, 0.0));
        let (q, _) = householder_qr(&mean).unwrap();
        // Hand result: the mean is a rotation by theta/2 scaled by cos(theta/2);
        // QR strips the positive scale, leaving the rotation by theta/2.
        let half = theta / 2.0;
        let want = ComplexMatrix::from_fn(2, 2, |r, c| {
            let v = [[half.cos(), -half.sin()], [half.sin(), half.cos()]][r][c];
            num_complex::Complex64::new(v, 0.0)
        });
        assert!(q.sub(&want).unwrap().frob_norm() < 1e-12);
    }

    #[test]
    fn early_stop_logic() {
        assert!(!early_stop(&[1.0, 0.9, 0.8], 2, 0.01));
        assert!(early_stop(&[1.0, 0.999, 0.998], 2, 0.01));
        assert!(!early_stop(&[1.0, 0.5, 0.49, 0.24], 2, 0.01));
        assert!(early_stop(&[1.0, 0.5, 0.499, 0.4999], 2, 0.01));
    }

    #[test]
    fn training_log_csv_shape() {
        let rows = vec![
            BatchRecord {
                epoch: 1,
                batch: 1,
                train_loss: 0.5,
                f_term: 2.0,
                q_term: 0.25,
                test_loss: None,
                wall_seconds: 0.1234,
            },
            BatchRecord {
                epoch: 1,
                batch: 2,
                train_loss: 0.4,
                f_term: 1.5,
                q_term: 0.2,
                test_loss: Some(0.45),
                wall_seconds: 0.25,
            },
        ];
        let mut buf = Vec::new();
        write_training_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,batch,train_loss,f_term,q_term,test_loss,wall_seconds"
        );
        assert_eq!(lines.next().unwrap(), "1,1,0.5,2,0.25,,0.123");
        assert_eq!(lines.next().unwrap(), "1,2,0.4,1.5,0.2,0.45,0.250");
    }
}
