//! Experiment drivers behind the CLI subcommands.

use std::path::{Path, PathBuf};

use bsam_core::data::{gen_gaussian_blobs, gen_shift_samples, inject_symmetric_noise, split};
use bsam_core::models::{build_mlp, kind_name};
use bsam_core::optim::LrSchedule;
use bsam_core::probes::{loss_slice, random_directions, sharpness_report, EigenOptions, LossSlice};
use bsam_core::train::{evaluate, total_steps, train, EpochRecord, TrainConfig, TrainOutcome};
use bsam_core::{rng, Batch, Dataset, ModelSpec, OptimizerState, ParamVector, SharpnessReport};

use crate::config::{DataSource, ExperimentConfig, ModelConfig};
use crate::error::{LabError, Result};
use crate::formats::{
    checkpoint_text, dataset_csv, load_csv, load_idx, metrics_csv, report_text, slice_tsv, write_file,
    Checkpoint, MetricsRow,
};

/// The full dataset before splitting. Depends on `data.seed` only.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(match &d.source {
        DataSource::Blobs { separation } => gen_gaussian_blobs(d.n, d.dim, d.classes, *separation, d.seed)?,
        DataSource::Shifts { std } => gen_shift_samples(d.n, d.dim, *std, d.seed)?,
        DataSource::Csv { path } => load_csv(path, d.classes)?,
        DataSource::Idx { images, labels } => load_idx(images, labels, d.classes)?,
    })
}

/// Everything a single seed trains on.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub spec: ModelSpec,
    pub init: ParamVector,
    pub train: Dataset,
    /// Held-out split with clean labels.
    pub test: Dataset,
}

impl SeedSetup {
    /// The deterministic batch used by every probe: the head of the training
    /// split, capped at `probe.max_samples`.
    pub fn probe_batch(&self, cfg: &ExperimentConfig) -> Result<Batch> {
        Ok(self.train.head_batch(cfg.probe.max_samples)?)
    }
}

pub fn setup_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let full = load_dataset(cfg)?;
    let (mut train_set, test) = split(&full, cfg.data.test_fraction, seed)?;
    if cfg.data.noise_rate > 0.0 {
        let noise_seed = rng::stream_key(seed, "noise-seed") ^ cfg.data.seed;
        let noisy = inject_symmetric_noise(train_set.labels(), cfg.data.classes, cfg.data.noise_rate, noise_seed)?;
        train_set = train_set.with_labels(noisy)?;
    }
    let (init, spec) = match &cfg.model {
        ModelConfig::Mlp { layers } => build_mlp(layers, *layers.last().unwrap_or(&0), seed)?,
        ModelConfig::Quadratic { init, .. } => {
            let spec = cfg.model.spec()?;
            (spec.landscape_point(init.clone())?, spec)
        }
        ModelConfig::DoubleWell { init, .. } => {
            let spec = cfg.model.spec()?;
            (spec.landscape_point(vec![*init])?, spec)
        }
    };
    Ok(SeedSetup {
        spec,
        init,
        train: train_set,
        test,
    })
}

pub fn eigen_options(cfg: &ExperimentConfig, seed: u64) -> EigenOptions {
    EigenOptions {
        k: cfg.probe.k,
        iters: cfg.probe.iters,
        tol: cfg.probe.tol,
        seed,
    }
}

/// Result of training one seed, before anything touches disk.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub setup: SeedSetup,
    pub outcome: TrainOutcome,
    pub report: Option<SharpnessReport>,
}

impl SeedRun {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.outcome.epochs.last()
    }

    pub fn lambda_max(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.eigenvalues.first().copied())
    }
}

/// Trains one seed and, unless it diverged, probes the final point.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let setup = setup_seed(cfg, seed)?;
    let steps = total_steps(setup.train.len(), cfg.train.batch_size, cfg.train.epochs);
    let opt = cfg.opt.build(steps)?;
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed,
    };
    let outcome = train(&setup.spec, setup.init.clone(), opt, &setup.train, Some(&setup.test), &tc)?;
    let report = if outcome.divergence.is_none() {
        let batch = setup.probe_batch(cfg)?;
        let eig = eigen_options(cfg, seed);
        Some(sharpness_report(&outcome.params, &batch, &setup.spec, cfg.probe.rho, &eig)?)
    } else {
        None
    };
    Ok(SeedRun {
        seed,
        setup,
        outcome,
        report,
    })
}

fn trace_rows(run_id: &str, run: &SeedRun) -> Vec<MetricsRow> {
    let per_epoch = run.outcome.steps.len() / run.outcome.epochs.len().max(1);
    let (mut fwd, mut bwd) = (0, 0);
    let mut rows = Vec::with_capacity(run.outcome.steps.len());
    for (i, s) in run.outcome.steps.iter().enumerate() {
        fwd += s.fwd;
        bwd += s.bwd;
        let epoch_end = run.outcome.epochs.iter().find(|e| e.step == i + 1);
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            seed: run.seed,
            epoch: epoch_end.map_or(i / per_epoch.max(1) + 1, |e| e.epoch),
            step: i + 1,
            lr: s.lr_t,
            rho_min: s.rho_min_t,
            train_loss: s.loss,
            test_loss: epoch_end.and_then(|e| e.test_loss),
            test_acc: epoch_end.and_then(|e| e.test_acc),
            grad_norm: s.norm_g,
            cos_g_gmin: s.cos_g_gmin,
            fwd_total: fwd,
            bwd_total: bwd,
        });
    }
    rows
}

pub fn metrics_rows(run_id: &str, run: &SeedRun, trace: bool) -> Vec<MetricsRow> {
    let mut rows = if trace {
        trace_rows(run_id, run)
    } else {
        run.outcome
            .epochs
            .iter()
            .map(|e| MetricsRow::from_epoch(run_id, run.seed, e))
            .collect()
    };
    if let Some(d) = run.outcome.divergence {
        let last = run.outcome.epochs.last();
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            seed: run.seed,
            epoch: d.epoch,
            step: d.step,
            lr: f64::NAN,
            rho_min: f64::NAN,
            train_loss: d.loss,
            test_loss: None,
            test_acc: None,
            grad_norm: d.grad_norm,
            cos_g_gmin: None,
            fwd_total: last.map_or(0, |e| e.fwd_total),
            bwd_total: last.map_or(0, |e| e.bwd_total),
        });
    }
    rows
}

pub fn seed_dir(out: &Path, run_id: &str, seed: u64) -> PathBuf {
    out.join(run_id).join(format!("seed-{seed}"))
}

/// Trains every configured seed and writes `metrics.csv`, `checkpoint.txt`
/// and `report.txt` under `<out>/<run_id>/seed-<seed>/`.
pub fn run_training(cfg: &ExperimentConfig, out: &Path, trace: bool) -> Result<Vec<SeedRun>> {
    let run_id = &cfg.train.run_id;
    let mut runs = Vec::with_capacity(cfg.train.seeds.len());
    for &seed in &cfg.train.seeds {
        let run = train_seed(cfg, seed)?;
        let dir = seed_dir(out, run_id, seed);
        write_file(&dir.join("metrics.csv"), &metrics_csv(&metrics_rows(run_id, &run, trace))?)?;
        if let Some(d) = run.outcome.divergence {
            return Err(LabError::Run {
                run_id: run_id.clone(),
                seed,
                source: d.into(),
            });
        }
        let ckpt = Checkpoint {
            run_id: run_id.clone(),
            seed,
            model: kind_name(&run.setup.spec),
            params: run.outcome.params.clone(),
        };
        write_file(&dir.join("checkpoint.txt"), checkpoint_text(&ckpt).as_bytes())?;
        let last = run.final_epoch().expect("completed run has epochs");
        let mut extra = vec![
            ("final_train_loss", last.train_loss.to_string()),
            ("fwd_total", last.fwd_total.to_string()),
            ("bwd_total", last.bwd_total.to_string()),
        ];
        if let Some(l) = last.test_loss {
            extra.push(("test_loss", l.to_string()));
        }
        if let Some(a) = last.test_acc {
            extra.push(("test_acc", a.to_string()));
        }
        let report = run.report.as_ref().expect("completed run has a report");
        let text = report_text(run_id, seed, cfg.opt.variant.as_str(), report, &extra);
        write_file(&dir.join("report.txt"), text.as_bytes())?;
        runs.push(run);
    }
    Ok(runs)
}

/// Sample mean and standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run_id: String,
    pub variant: String,
    pub seeds: usize,
    pub test_acc: Option<(f64, f64)>,
    pub lambda_max: Option<(f64, f64)>,
}

pub const COMPARE_HEADER: &str =
    "run_id,variant,seeds,test_acc_mean,test_acc_std,lambda_max_mean,lambda_max_std";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let pair = |p: Option<(f64, f64)>| p.map_or(",".to_string(), |(m, s)| format!("{m},{s}"));
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.run_id,
            r.variant,
            r.seeds,
            pair(r.test_acc),
            pair(r.lambda_max)
        ));
    }
    out
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[SeedRun]) -> CompareRow {
    let acc: Vec<f64> = runs.iter().filter_map(|r| r.final_epoch().and_then(|e| e.test_acc)).collect();
    let lam: Vec<f64> = runs.iter().filter_map(SeedRun::lambda_max).collect();
    CompareRow {
        run_id: cfg.train.run_id.clone(),
        variant: cfg.opt.variant.as_str().to_string(),
        seeds: runs.len(),
        test_acc: (acc.len() == runs.len() && !acc.is_empty()).then(|| mean_std(&acc)),
        lambda_max: (lam.len() == runs.len() && !lam.is_empty()).then(|| mean_std(&lam)),
    }
}

/// Runs each configuration (under `<out>/<index>/`) and writes
/// `compare.csv` with per-run mean and sample std over seeds.
pub fn compare(configs: &[ExperimentConfig], out: &Path) -> Result<Vec<CompareRow>> {
    if configs.len() < 2 {
        return Err(LabError::Mismatch("compare needs at least two configs".into()));
    }
    let first = &configs[0];
    let mut seeds = first.train.seeds.clone();
    seeds.sort_unstable();
    for c in &configs[1..] {
        let mut s = c.train.seeds.clone();
        s.sort_unstable();
        if s != seeds {
            return Err(LabError::Mismatch(format!(
                "seed sets differ: {:?} vs {:?}",
                first.train.seeds, c.train.seeds
            )));
        }
        if c.model != first.model || c.data != first.data {
            return Err(LabError::Mismatch("compared configs must share model and data".into()));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        let runs = run_training(c, &out.join(i.to_string()), false)?;
        rows.push(summarize(c, &runs));
    }
    write_file(&out.join("compare.csv"), compare_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceResult {
    pub horizons: Vec<usize>,
    pub lrs: Vec<f64>,
    /// `A(T) = (1/T) Σ ‖∇L(w_t)‖²`.
    pub averages: Vec<f64>,
    /// Least-squares slope of `ln A` against `ln T`.
    pub slope: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Runs the configured variant on the quadratic landscape with a constant
/// `η = c/√T` for each horizon `T`, using exact (zero-shift) gradients.
pub fn convergence_check(cfg: &ExperimentConfig) -> Result<ConvergenceResult> {
    let ModelConfig::Quadratic { init, .. } = &cfg.model else {
        return Err(bsam_core::Error::Config("convergence check needs a quadratic landscape".into()).into());
    };
    let spec = cfg.model.spec()?;
    let batch = Batch::zero_shift(init.len());
    let mut lrs = Vec::new();
    let mut averages = Vec::new();
    for &t in &cfg.convergence.horizons {
        let lr = cfg.convergence.c / (t as f64).sqrt();
        let mut oc = cfg.opt.build(t)?;
        oc.lr = LrSchedule::constant(lr, t)?;
        let mut opt = OptimizerState::new(oc, init.len())?;
        let mut w = spec.landscape_point(init.clone())?;
        let mut sum = 0.0;
        for _ in 0..t {
            let (next, s) = opt.step(&w, &batch, &spec)?;
            sum += s.norm_g * s.norm_g;
            w = next;
        }
        let a = sum / t as f64;
        if !a.is_finite() {
            return Err(bsam_core::Error::NonFinite("convergence run").into());
        }
        lrs.push(lr);
        averages.push(a);
    }
    let lx: Vec<f64> = cfg.convergence.horizons.iter().map(|&t| (t as f64).ln()).collect();
    let ly: Vec<f64> = averages.iter().map(|a| a.ln()).collect();
    Ok(ConvergenceResult {
        horizons: cfg.convergence.horizons.clone(),
        lrs,
        slope: ls_slope(&lx, &ly),
        averages,
    })
}

pub fn convergence_csv(r: &ConvergenceResult) -> String {
    let mut s = String::from("horizon,lr,avg_sq_grad_norm\n");
    for ((t, lr), a) in r.horizons.iter().zip(&r.lrs).zip(&r.averages) {
        s.push_str(&format!("{t},{lr},{a}\n"));
    }
    s
}

/// Probe report for a checkpoint, on the probe batch of its seed.
pub fn probe_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<SharpnessReport> {
    let setup = setup_seed(cfg, ckpt.seed)?;
    setup.spec.check_params(&ckpt.params)?;
    let batch = setup.probe_batch(cfg)?;
    Ok(sharpness_report(
        &ckpt.params,
        &batch,
        &setup.spec,
        cfg.probe.rho,
        &eigen_options(cfg, ckpt.seed),
    )?)
}

/// Filter-normalized loss slice around a checkpoint on its probe batch.
pub fn emit_slice(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<LossSlice> {
    let setup = setup_seed(cfg, ckpt.seed)?;
    setup.spec.check_params(&ckpt.params)?;
    let batch = setup.probe_batch(cfg)?;
    let (d1, d2) = random_directions(&ckpt.params, ckpt.seed);
    Ok(loss_slice(
        &ckpt.params,
        &setup.spec,
        &batch,
        &d1,
        &d2,
        cfg.probe.slice_grid,
        cfg.probe.slice_extent,
    )?)
}

pub fn write_slice(out: &Path, slice: &LossSlice) -> Result<PathBuf> {
    let path = out.join("slice.tsv");
    write_file(&path, slice_tsv(slice).as_bytes())?;
    Ok(path)
}

/// Writes the full generated or loaded dataset as CSV.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let path = out.join("data.csv");
    write_file(&path, &dataset_csv(&data))?;
    Ok(path)
}

/// Held-out loss and accuracy of a checkpoint.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<(f64, Option<f64>)> {
    let setup = setup_seed(cfg, ckpt.seed)?;
    Ok(evaluate(&ckpt.params, &setup.test, &setup.spec)?)
}
