//! SGD, SAM and bilateral SAM (BSAM) on a heavy-ball SGD base.
//!
//! A BSAM step evaluates three gradients on one mini-batch: at `w`, at the
//! ascent point `w + ε̂_max` and at the descent point `w + ε̂_min`. The
//! composite direction
//!
//! ```text
//!   g + g_max − (‖g_max‖ / ‖g_min‖) · g_min + λ·w
//! ```
//!
//! is fed to momentum SGD. The descent radius `ρ_min` follows the learning
//! rate linearly, from `ρ̂` at `lr_max` down to `ρ̌` at `lr_min`.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{grad, PassCount};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::models::ModelSpec;
use crate::params::{cosine_similarity, ParamVector};

pub const DEFAULT_ZERO_GRAD_EPS: f64 = 1e-12;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.001;
pub const DEFAULT_RHO: f64 = 0.05;

/// Slack on learning-rate range checks.
const LR_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Sgd,
    Sam,
    Bsam,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sgd, Variant::Sam, Variant::Bsam];

    /// Gradient evaluations per regular step.
    pub fn passes_per_step(self) -> u64 {
        match self {
            Variant::Sgd => 1,
            Variant::Sam => 2,
            Variant::Bsam => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Sam => "sam",
            Variant::Bsam => "bsam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Variant::Sgd),
            "sam" => Ok(Variant::Sam),
            "bsam" => Ok(Variant::Bsam),
            _ => Err(Error::config("optimizer variant must be sgd, sam or bsam")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total_steps`.
/// `lr_max == lr_min` gives a constant rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        if !(lr_min >= 0.0 && lr_max >= lr_min && lr_max.is_finite()) {
            return Err(Error::config("learning rates need lr_max >= lr_min >= 0"));
        }
        if total_steps < 1 {
            return Err(Error::config("learning-rate schedule needs at least one step"));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    pub fn constant(lr: f64, total_steps: usize) -> Result<Self> {
        Self::new(lr, lr, total_steps)
    }
}

/// `ρ_min` endpoints: `rho_hat` at `lr_max`, `rho_check` at `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoMinSchedule {
    pub rho_hat: f64,
    pub rho_check: f64,
}

impl RhoMinSchedule {
    pub fn new(rho_hat: f64, rho_check: f64) -> Result<Self> {
        if !(rho_check >= 0.0 && rho_hat >= rho_check && rho_hat.is_finite()) {
            return Err(Error::config("rho_min schedule needs rho_hat >= rho_check >= 0"));
        }
        Ok(Self { rho_hat, rho_check })
    }

    pub fn fixed(rho: f64) -> Result<Self> {
        Self::new(rho, rho)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, lrs: &LrSchedule) -> Result<f64> {
    if t > lrs.total_steps {
        return Err(Error::Range {
            what: "step",
            value: t as f64,
            lo: 0.0,
            hi: lrs.total_steps as f64,
        });
    }
    if lrs.lr_max == lrs.lr_min {
        return Ok(lrs.lr_max);
    }
    if t == 0 {
        return Ok(lrs.lr_max);
    }
    if t == lrs.total_steps {
        return Ok(lrs.lr_min);
    }
    let phase = math::cos(PI * t as f64 / lrs.total_steps as f64);
    Ok(lrs.lr_min + 0.5 * (lrs.lr_max - lrs.lr_min) * (1.0 + phase))
}

/// Linear map from the current learning rate to the descent radius,
/// clamped to `[ρ̌, ρ̂]`.
pub fn rho_min_at(lr_t: f64, sched: &RhoMinSchedule, lrs: &LrSchedule) -> Result<f64> {
    if !(lr_t >= lrs.lr_min - LR_SLACK && lr_t <= lrs.lr_max + LR_SLACK) {
        return Err(Error::Range {
            what: "learning rate",
            value: lr_t,
            lo: lrs.lr_min,
            hi: lrs.lr_max,
        });
    }
    if lrs.lr_max == lrs.lr_min {
        return Ok(sched.rho_hat);
    }
    let frac = (lr_t - lrs.lr_min) / (lrs.lr_max - lrs.lr_min);
    let rho = sched.rho_check + (sched.rho_hat - sched.rho_check) * frac;
    Ok(rho.clamp(sched.rho_check, sched.rho_hat))
}

/// First-order solution of `max/min εᵀg` over the ball `‖ε‖_q ≤ ρ`
/// (`1/p + 1/q = 1`): `±ρ sign(g)|g|^{p−1} / (‖g‖_p^p)^{1/q}`, which for
/// `p = 2` is `±ρ g/‖g‖`. Returns zeros when `ρ = 0` or `‖g‖ ≤ zero_grad_eps`.
pub fn compute_perturbation(
    g: &ParamVector,
    rho: f64,
    direction: Direction,
    p: f64,
    zero_grad_eps: f64,
) -> Result<ParamVector> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::config("perturbation norm p must be finite and > 1"));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::Range {
            what: "rho",
            value: rho,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let norm = g.norm();
    if rho == 0.0 || norm <= zero_grad_eps {
        return Ok(g.zeros_like());
    }
    let signed = match direction {
        Direction::Ascent => rho,
        Direction::Descent => -rho,
    };
    if p == 2.0 {
        return Ok(g.scaled(signed / norm));
    }
    let q = p / (p - 1.0);
    let sum_p: f64 = g.values().iter().map(|x| math::powf(x.abs(), p)).sum();
    let denom = math::powf(sum_p, 1.0 / q);
    let eps: Vec<f64> = g
        .values()
        .iter()
        .map(|&x| {
            let mag = math::powf(x.abs(), p - 1.0);
            signed * x.signum() * mag / denom
        })
        .map(|v| if v.is_nan() { 0.0 } else { v })
        .collect();
    g.with_values(eps)
}

/// `‖g_max‖ / ‖g_min‖`, or 0 when `‖g_min‖ ≤ zero_grad_eps`.
pub fn scale_factor(g_max: &ParamVector, g_min: &ParamVector, zero_grad_eps: f64) -> f64 {
    let n_min = g_min.norm();
    if n_min <= zero_grad_eps {
        0.0
    } else {
        g_max.norm() / n_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho_max: f64,
    pub rho_min: RhoMinSchedule,
    pub lr: LrSchedule,
    pub p_norm: f64,
    pub zero_grad_eps: f64,
}

impl OptimizerConfig {
    /// Defaults: μ = 0.9, λ = 0.001, ρ_max = ρ̂ = 0.05, ρ̌ = 0, p = 2.
    pub fn new(variant: Variant, lr: LrSchedule) -> Self {
        Self {
            variant,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            rho_max: DEFAULT_RHO,
            rho_min: RhoMinSchedule {
                rho_hat: DEFAULT_RHO,
                rho_check: 0.0,
            },
            lr,
            p_norm: 2.0,
            zero_grad_eps: DEFAULT_ZERO_GRAD_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight decay must be >= 0"));
        }
        if !(self.rho_max >= 0.0) || !self.rho_max.is_finite() {
            return Err(Error::config("rho_max must be >= 0"));
        }
        RhoMinSchedule::new(self.rho_min.rho_hat, self.rho_min.rho_check)?;
        LrSchedule::new(self.lr.lr_max, self.lr.lr_min, self.lr.total_steps)?;
        if !(self.p_norm > 1.0) || !self.p_norm.is_finite() {
            return Err(Error::config("p_norm must be > 1"));
        }
        if !(self.zero_grad_eps >= 0.0) {
            return Err(Error::config("zero_grad_eps must be >= 0"));
        }
        Ok(())
    }
}

/// Per-step record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Forward passes spent in this step.
    pub fwd: u64,
    /// Backward passes spent in this step.
    pub bwd: u64,
    /// Batch loss at `w` before the update.
    pub loss: f64,
    pub norm_g: f64,
    /// 0 for SGD.
    pub norm_gmax: f64,
    /// 0 unless BSAM.
    pub norm_gmin: f64,
    pub scale: f64,
    pub cos_g_gmin: Option<f64>,
    pub lr_t: f64,
    pub rho_min_t: f64,
}

/// Single-owner optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    t: usize,
    momentum_buf: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            momentum_buf: alloc::vec![0.0; param_dim],
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn momentum_buf(&self) -> &[f64] {
        &self.momentum_buf
    }

    /// One step of the configured variant.
    pub fn step(
        &mut self,
        params: &ParamVector,
        batch: &Batch,
        spec: &ModelSpec,
    ) -> Result<(ParamVector, StepStats)> {
        match self.config.variant {
            Variant::Sgd => self.sgd_step(params, batch, spec),
            Variant::Sam => self.sam_step(params, batch, spec),
            Variant::Bsam => self.bsam_step(params, batch, spec),
        }
    }

    fn require(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::config("step rule does not match the optimizer variant"));
        }
        Ok(())
    }

    fn begin(&self, params: &ParamVector) -> Result<f64> {
        if params.len() != self.momentum_buf.len() {
            return Err(Error::dim("optimizer state", self.momentum_buf.len(), params.len()));
        }
        if self.t >= self.config.lr.total_steps {
            return Err(Error::Range {
                what: "step",
                value: (self.t + 1) as f64,
                lo: 0.0,
                hi: self.config.lr.total_steps as f64,
            });
        }
        cosine_lr(self.t, &self.config.lr)
    }

    /// Adds `λw` to the composite, updates the momentum buffer and returns
    /// `w − lr·buf`. Commits the step counter.
    fn apply(&mut self, params: &ParamVector, composite: &[f64], lr: f64) -> Result<ParamVector> {
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        let mut next = params.values().to_vec();
        for ((b, c), w) in self.momentum_buf.iter_mut().zip(composite).zip(next.iter_mut()) {
            *b = mu * *b + (c + wd * *w);
            *w -= lr * *b;
        }
        self.t += 1;
        params.with_values(next)
    }

    /// `g ← ∇L(w) + λw; buf ← μ·buf + g; w ← w − η_t·buf`.
    pub fn sgd_step(
        &mut self,
        params: &ParamVector,
        batch: &Batch,
        spec: &ModelSpec,
    ) -> Result<(ParamVector, StepStats)> {
        self.require(Variant::Sgd)?;
        let lr = self.begin(params)?;
        let mut passes = PassCount::new();
        let (loss, g) = grad(params, batch, spec, &mut passes)?;
        let next = self.apply(params, g.values(), lr)?;
        Ok((
            next,
            StepStats {
                fwd: passes.forward,
                bwd: passes.backward,
                loss,
                norm_g: g.norm(),
                lr_t: lr,
                ..StepStats::default()
            },
        ))
    }

    /// Gradient at the ascent point `w + ρ_max ĝ`, same batch.
    pub fn sam_step(
        &mut self,
        params: &ParamVector,
        batch: &Batch,
        spec: &ModelSpec,
    ) -> Result<(ParamVector, StepStats)> {
        self.require(Variant::Sam)?;
        let lr = self.begin(params)?;
        let cfg = self.config;
        let mut passes = PassCount::new();
        let (loss, g) = grad(params, batch, spec, &mut passes)?;
        let norm_g = g.norm();
        let mut stats = StepStats {
            loss,
            norm_g,
            lr_t: lr,
            ..StepStats::default()
        };
        let composite = if norm_g <= cfg.zero_grad_eps {
            g
        } else {
            let eps_max =
                compute_perturbation(&g, cfg.rho_max, Direction::Ascent, cfg.p_norm, cfg.zero_grad_eps)?;
            let (_, g_max) = grad(&params.add_scaled(1.0, &eps_max)?, batch, spec, &mut passes)?;
            stats.norm_gmax = g_max.norm();
            g_max
        };
        let next = self.apply(params, composite.values(), lr)?;
        stats.fwd = passes.forward;
        stats.bwd = passes.backward;
        Ok((next, stats))
    }

    /// Composite `g + g_max − (‖g_max‖/‖g_min‖)·g_min`, three evaluations on
    /// one batch. With `‖g‖ ≤ zero_grad_eps` both sharpness terms are dropped
    /// and only one evaluation is spent.
    pub fn bsam_step(
        &mut self,
        params: &ParamVector,
        batch: &Batch,
        spec: &ModelSpec,
    ) -> Result<(ParamVector, StepStats)> {
        self.require(Variant::Bsam)?;
        let lr = self.begin(params)?;
        let cfg = self.config;
        let rho_min = rho_min_at(lr, &cfg.rho_min, &cfg.lr)?;
        let mut passes = PassCount::new();
        let (loss, g) = grad(params, batch, spec, &mut passes)?;
        let norm_g = g.norm();
        let mut stats = StepStats {
            loss,
            norm_g,
            lr_t: lr,
            rho_min_t: rho_min,
            ..StepStats::default()
        };
        let composite: Vec<f64> = if norm_g <= cfg.zero_grad_eps {
            g.into_values()
        } else {
            let eps_max =
                compute_perturbation(&g, cfg.rho_max, Direction::Ascent, cfg.p_norm, cfg.zero_grad_eps)?;
            let (_, g_max) = grad(&params.add_scaled(1.0, &eps_max)?, batch, spec, &mut passes)?;
            let eps_min =
                compute_perturbation(&g, rho_min, Direction::Descent, cfg.p_norm, cfg.zero_grad_eps)?;
            let (_, g_min) = grad(&params.add_scaled(1.0, &eps_min)?, batch, spec, &mut passes)?;
            let scale = scale_factor(&g_max, &g_min, cfg.zero_grad_eps);
            stats.norm_gmax = g_max.norm();
            stats.norm_gmin = g_min.norm();
            stats.scale = scale;
            stats.cos_g_gmin = cosine_similarity(&g, &g_min).ok();
            g.values()
                .iter()
                .zip(g_max.values())
                .zip(g_min.values())
                .map(|((a, b), c)| a + b - scale * c)
                .collect()
        };
        let next = self.apply(params, &composite, lr)?;
        stats.fwd = passes.forward;
        stats.bwd = passes.backward;
        Ok((next, stats))
    }
}
