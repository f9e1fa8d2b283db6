//! Implementations of the CLI subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use uwamod::channel::{self, ChannelDataset};
use uwamod::error::{Error, Result};
use uwamod::modem::{self, ModulationMatrix};
use uwamod::objective;
use uwamod::siamese::{self, Checkpoint};

use crate::config::RunConfig;

/// Which modulation to evaluate: a learned file or a named baseline.
pub enum FChoice {
    File(PathBuf),
    Identity,
    Dft,
}

impl FChoice {
    fn load(&self, n: usize) -> Result<ModulationMatrix> {
        match self {
            FChoice::File(path) => {
                let f = modem::load_fmatrix(path)?;
                if f.order() != n {
                    return Err(Error::Mismatch(format!(
                        "modulation file has order {}, configuration expects {n}",
                        f.order()
                    )));
                }
                Ok(f)
            }
            FChoice::Identity => ModulationMatrix::identity(n),
            FChoice::Dft => ModulationMatrix::dft(n),
        }
    }
}

fn dataset_summary(ds: &ChannelDataset) -> (f64, f64, f64, f64) {
    let t_g = ds.config.guard_duration();
    let mut gap_sum = 0.0;
    let mut gap_count = 0u64;
    let mut a_min = f64::INFINITY;
    let mut a_max = f64::NEG_INFINITY;
    let bins = 16;
    let mut power = vec![0.0f64; bins];
    let mut hits = vec![0u64; bins];
    for real in &ds.realizations {
        for w in real.paths.windows(2) {
            gap_sum += w[1].delay_s - w[0].delay_s;
            gap_count += 1;
        }
        for p in &real.paths {
            a_min = a_min.min(p.doppler_scale);
            a_max = a_max.max(p.doppler_scale);
            if t_g > 0.0 {
                let frac = p.delay_s / t_g;
                if frac < 1.0 {
                    let b = (frac * bins as f64) as usize;
                    power[b] += p.amplitude * p.amplitude;
                    hits[b] += 1;
                }
            }
        }
    }
    let mean_gap = if gap_count > 0 { gap_sum / gap_count as f64 } else { 0.0 };

    // Least-squares decay slope in dB across the guard interval.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in 0..bins {
        if hits[b] > 10 {
            xs.push((b as f64 + 0.5) / bins as f64);
            ys.push(10.0 * (power[b] / hits[b] as f64).log10());
        }
    }
    let slope = if xs.len() >= 2 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    (mean_gap, slope, a_min, a_max)
}

pub fn cmd_gen_dataset(
    config: &RunConfig,
    out: &Path,
    seed: Option<u64>,
    count: Option<usize>,
) -> Result<()> {
    let sys = config.system_config();
    let seed = seed.unwrap_or(config.train.seed);
    let count = count.unwrap_or(config.train.m_train);
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    let ds = channel::generate_dataset(&sys, seed, count)?;
    channel::save_dataset(&ds, out)?;
    let (mean_gap, slope, a_lo, a_hi) = dataset_summary(&ds);
    println!("wrote {} realizations to {}", ds.len(), out.display());
    println!("  seed                : {seed}");
    println!("  mean inter-arrival  : {:.6} ms", mean_gap * 1e3);
    println!("  decay slope fit     : {slope:.2} dB across the guard interval");
    println!("  doppler scale range : [{a_lo:.3e}, {a_hi:.3e}] (a_max = {:.3e})",
        sys.max_doppler_scale());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &RunConfig,
    train_path: &Path,
    test_path: &Path,
    out_checkpoint: &Path,
    out_fmatrix: &Path,
    log_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let sys = config.system_config();
    let tc = config.train_config();
    let train_set = channel::load_dataset(train_path, Some(&sys))?;
    let test_set = channel::load_dataset(test_path, Some(&sys))?;

    let state = match resume {
        Some(path) => {
            let ck = siamese::load_checkpoint(path)?;
            if ck.num_subcarriers != sys.num_subcarriers || ck.guard_len != sys.guard_len {
                return Err(Error::Mismatch(format!(
                    "checkpoint geometry {}+{} differs from configuration {}+{}",
                    ck.num_subcarriers, ck.guard_len, sys.num_subcarriers, sys.guard_len
                )));
            }
            println!(
                "resuming from {} ({} epochs, step {})",
                path.display(),
                ck.state.epochs_completed(),
                ck.state.step
            );
            siamese::train_from(ck.state, &train_set, &test_set, &tc)?
        }
        None => siamese::train(&train_set, &test_set, &tc)?,
    };

    let (f_final, consistency) = siamese::finalize_modulation(&state, &test_set)?;
    modem::save_fmatrix(&f_final, out_fmatrix)?;
    siamese::save_checkpoint(
        &Checkpoint {
            num_subcarriers: sys.num_subcarriers,
            guard_len: sys.guard_len,
            config: tc.clone(),
            state: state.clone(),
        },
        out_checkpoint,
    )?;
    if let Some(path) = log_path {
        let mut w = BufWriter::new(File::create(path)?);
        siamese::write_training_log(&state.log, &mut w)?;
        w.flush()?;
    }

    // Fairness on the test set: learned modulation vs the DFT baseline.
    let dft = ModulationMatrix::dft(sys.num_subcarriers)?;
    let f_fair = mean_test_fairness(&test_set, &f_final, tc.sigma2)?;
    let dft_fair = mean_test_fairness(&test_set, &dft, tc.sigma2)?;

    println!("trained {} epochs ({} adam steps)", state.epochs_completed(), state.step);
    if let Some(last) = state.test_loss_history.last() {
        println!("  final test loss          : {last:.6e}");
    }
    println!("  consistency mean q(Fm,F) : {consistency:.6e}");
    println!("  mean test fairness (F)   : {f_fair:.6e}");
    println!("  mean test fairness (DFT) : {dft_fair:.6e}");
    println!("  checkpoint: {}", out_checkpoint.display());
    println!("  modulation: {}", out_fmatrix.display());
    Ok(())
}

/// Mean fairness objective of a fixed modulation across a dataset.
pub fn mean_test_fairness(
    dataset: &ChannelDataset,
    f: &ModulationMatrix,
    sigma2: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for paths in &dataset.realizations {
        let h = channel::build_channel_matrix(paths, &dataset.config)?;
        let c = objective::error_correlation(&h, f, sigma2)?;
        let profile = objective::mse_profile(&c)?;
        let target = objective::optimal_profile(&c)?;
        sum += objective::fairness_objective(&profile, &target)?;
    }
    Ok(sum / dataset.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval_ber(
    config: &RunConfig,
    dataset_path: &Path,
    choice: &FChoice,
    snr_override: Option<Vec<f64>>,
    trials_override: Option<u64>,
    seed_override: Option<u64>,
    out: &Path,
    plot_data: Option<&Path>,
) -> Result<()> {
    let sys = config.system_config();
    let ds = channel::load_dataset(dataset_path, Some(&sys))?;
    let f = choice.load(sys.num_subcarriers)?;
    let snrs = snr_override.unwrap_or_else(|| config.eval.snr_db.clone());
    let trials = trials_override.unwrap_or(config.eval.trials_per_realization);
    let seed = seed_override.unwrap_or(config.eval.noise_seed);

    let points = modem::ber_sweep(&f, &ds, &snrs, trials, seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    modem::write_ber_csv(&points, &mut w)?;
    w.flush()?;
    if let Some(path) = plot_data {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "snr_db\tlog10_ber")?;
        for p in &points {
            if p.ber > 0.0 {
                writeln!(w, "{}\t{}", p.snr_db, p.ber.log10())?;
            } else {
                writeln!(w, "{}\t", p.snr_db)?;
            }
        }
        w.flush()?;
    }
    for p in &points {
        println!(
            "snr {:>6.2} dB: ber {:.3e} ({} errors / {} bits)",
            p.snr_db, p.ber, p.bit_errors, p.bits
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn profile_stats(e: &[f64]) -> (f64, f64, f64) {
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = e.iter().copied().fold(f64::INFINITY, f64::min);
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max, var.sqrt())
}

pub fn cmd_inspect(
    config: &RunConfig,
    dataset_path: &Path,
    fmatrix_path: Option<&Path>,
    snr_db: Option<f64>,
    out_csv: Option<&Path>,
) -> Result<()> {
    let sys = config.system_config();
    let ds = channel::load_dataset(dataset_path, Some(&sys))?;
    if ds.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let snr = snr_db.unwrap_or(config.eval.snr_db[0]);
    let sigma2 = 10f64.powf(-snr / 10.0);
    let n = sys.num_subcarriers;

    let mut names = vec!["identity".to_string(), "dft".to_string()];
    let mut mats = vec![
        ModulationMatrix::identity(n)?.into_matrix(),
        ModulationMatrix::dft(n)?.into_matrix(),
    ];
    if let Some(path) = fmatrix_path {
        let f = modem::load_fmatrix(path)?;
        if f.order() != n {
            return Err(Error::Mismatch(format!(
                "modulation file has order {}, configuration expects {n}",
                f.order()
            )));
        }
        println!(
            "unitarity residual of {}: {:.3e}",
            path.display(),
            f.as_matrix().unitarity_residual()
        );
        names.push("learned".to_string());
        mats.push(f.into_matrix());
    }

    let h = channel::build_channel_matrix(&ds.realizations[0], &sys)?;
    let deviation = objective::trace_invariance_check(&h, sigma2, &mats)?;
    println!("snr {snr} dB (sigma2 = {sigma2:.4e}), first channel realization:");
    println!("  trace-invariance deviation across {{{}}}: {deviation:.3e}", names.join(", "));

    let mut profiles = Vec::new();
    for (name, m) in names.iter().zip(&mats) {
        let c = m.hermitian().matmul(
            &objective::error_correlation_core(&h, sigma2)?.matmul(m)?,
        )?;
        let profile = objective::mse_profile(&c)?;
        let (min, max, std) = profile_stats(&profile.e);
        println!("  e_H under {name:<8}: min {min:.4e}  max {max:.4e}  std {std:.4e}");
        profiles.push(profile);
    }

    if let Some(path) = out_csv {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "symbol,{}", names.join(","))?;
        for k in 0..n {
            let row: Vec<String> = profiles.iter().map(|p| p.e[k].to_string()).collect();
            writeln!(w, "{k},{}", row.join(","))?;
        }
        w.flush()?;
        println!("wrote per-symbol MSE profiles to {}", path.display());
    }
    Ok(())
}

pub fn cmd_export_f(fmatrix_path: &Path, format: &str, out: &Path) -> Result<()> {
    let f = modem::load_fmatrix(fmatrix_path)?;
    match format {
        "binary" => {
            modem::save_fmatrix(&f, out)?;
        }
        "csv" => {
            let n = f.order();
            let mut w = BufWriter::new(File::create(out)?);
            writeln!(w, "row,col,re,im")?;
            for r in 0..n {
                for c in 0..n {
                    let z = f.as_matrix().get(r, c);
                    // 17 significant digits reconstruct every f64 exactly.
                    writeln!(w, "{r},{c},{:.16e},{:.16e}", z.re, z.im)?;
                }
            }
            w.flush()?;
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown export format '{other}', expected csv or binary"
            )));
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

