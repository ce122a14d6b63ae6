//! Epoch loop with per-epoch and per-step records.

use alloc::vec::Vec;

use crate::autodiff::{forward_loss, logits, PassCount};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::optim::{OptimizerConfig, OptimizerState, StepStats};
use crate::params::ParamVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives the per-epoch shuffles.
    pub seed: u64,
}

/// Steps in a run: `epochs · ⌈n / b⌉`.
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch_size.max(1))
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    rng::stream_key(seed, "epoch-order") ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub rho_min: f64,
    /// Mean of the step losses.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// Only for classifiers.
    pub test_acc: Option<f64>,
    pub grad_norm: f64,
    /// Mean over steps that produced a cosine.
    pub cos_g_gmin: Option<f64>,
    pub fwd_total: u64,
    pub bwd_total: u64,
}

/// Where a run produced a non-finite loss or parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::Diverged {
            epoch: d.epoch,
            step: d.step,
            loss: d.loss,
            grad_norm: d.grad_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last finite parameters.
    pub params: ParamVector,
    /// Completed epochs only.
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepStats>,
    /// Set when the run stopped early on a non-finite value.
    pub divergence: Option<Divergence>,
}

/// Loss and, for classifiers, accuracy on a full dataset. Passes spent here
/// are not charged to training.
pub fn evaluate(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<(f64, Option<f64>)> {
    let batch = data.as_batch();
    let loss = forward_loss(params, &batch, spec, &mut PassCount::new())?;
    let acc = match spec {
        ModelSpec::Mlp(mlp) => {
            let z = logits(params, mlp, &batch.features)?;
            let hits = (0..z.rows())
                .filter(|&i| {
                    let row = z.row(i);
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
                    best == batch.labels[i]
                })
                .count();
            Some(hits as f64 / z.rows() as f64)
        }
        _ => None,
    };
    Ok((loss, acc))
}

/// Trains from `init` for `tc.epochs` epochs. The optimizer's learning-rate
/// horizon must equal [`total_steps`]. A non-finite loss or update stops the
/// run; the outcome then carries a [`Divergence`].
pub fn train(
    spec: &ModelSpec,
    init: ParamVector,
    config: OptimizerConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if tc.epochs < 1 {
        return Err(Error::config("epochs must be at least 1"));
    }
    let expected = total_steps(train_set.len(), tc.batch_size, tc.epochs);
    if config.lr.total_steps != expected {
        return Err(Error::dim("learning-rate horizon", expected, config.lr.total_steps));
    }
    spec.check_params(&init)?;
    let mut opt = OptimizerState::new(config, init.len())?;
    let mut params = init;
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut steps = Vec::with_capacity(expected);
    let (mut fwd, mut bwd) = (0u64, 0u64);
    for epoch in 1..=tc.epochs {
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let (mut cos_sum, mut cos_n) = (0.0, 0usize);
        let mut last = StepStats::default();
        let order = batches(train_set, tc.batch_size, epoch_seed(tc.seed, epoch))?;
        let count = order.len();
        for batch in &order {
            let (next, stats) = opt.step(&params, batch, spec)?;
            if !stats.loss.is_finite() || !next.is_finite() {
                return Ok(TrainOutcome {
                    params,
                    epochs,
                    steps,
                    divergence: Some(Divergence {
                        epoch,
                        step: opt.t(),
                        loss: stats.loss,
                        grad_norm: stats.norm_g,
                    }),
                });
            }
            params = next;
            fwd += stats.fwd;
            bwd += stats.bwd;
            loss_sum += stats.loss;
            norm_sum += stats.norm_g;
            if let Some(c) = stats.cos_g_gmin {
                cos_sum += c;
                cos_n += 1;
            }
            last = stats;
            steps.push(stats);
        }
        let (test_loss, test_acc) = match test_set {
            Some(t) => {
                let (l, a) = evaluate(&params, t, spec)?;
                (Some(l), a)
            }
            None => (None, None),
        };
        epochs.push(EpochRecord {
            epoch,
            step: opt.t(),
            lr: last.lr_t,
            rho_min: last.rho_min_t,
            train_loss: loss_sum / count as f64,
            test_loss,
            test_acc,
            grad_norm: norm_sum / count as f64,
            cos_g_gmin: (cos_n > 0).then(|| cos_sum / cos_n as f64),
            fwd_total: fwd,
            bwd_total: bwd,
        });
    }
    Ok(TrainOutcome {
        params,
        epochs,
        steps,
        divergence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;
    use crate::models::build_mlp;
    use crate::optim::{LrSchedule, Variant};

    fn setup(variant: Variant, epochs: usize) -> (ModelSpec, ParamVector, OptimizerConfig, Dataset, TrainConfig) {
        let data = gen_gaussian_blobs(40, 2, 2, 3.0, 1).unwrap();
        let (w, spec) = build_mlp(&[2, 8, 2], 2, 7).unwrap();
        let tc = TrainConfig { epochs, batch_size: 16, seed: 5 };
        let lr = LrSchedule::new(0.05, 0.0, total_steps(40, 16, epochs)).unwrap();
        (spec, w, OptimizerConfig::new(variant, lr), data, tc)
    }

    #[test]
    fn pass_totals_match_step_count() {
        for v in Variant::ALL {
            let (spec, w, cfg, data, tc) = setup(v, 2);
            let out = train(&spec, w, cfg, &data, Some(&data), &tc).unwrap();
            let last = out.epochs.last().unwrap();
            assert_eq!(last.step, 6);
            assert_eq!(last.fwd_total, 6 * v.passes_per_step());
            assert_eq!(last.bwd_total, 6 * v.passes_per_step());
            assert!(last.test_acc.is_some());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (spec, w, cfg, data, tc) = setup(Variant::Bsam, 3);
            train(&spec, w, cfg, &data, None, &tc).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let (spec, w, mut cfg, data, tc) = setup(Variant::Sgd, 2);
        cfg.lr.total_steps += 1;
        assert!(matches!(train(&spec, w, cfg, &data, None, &tc), Err(Error::Dimension { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, w, mut cfg, data, tc) = setup(Variant::Sgd, 2);
        cfg.lr = LrSchedule::constant(1e200, cfg.lr.total_steps).unwrap();
        let out = train(&spec, w.clone(), cfg, &data, None, &tc).unwrap();
        let d = out.divergence.expect("diverged");
        assert!(d.step >= 1 && out.params.is_finite());
        assert!(matches!(Error::from(d), Error::Diverged { .. }));
    }
}
