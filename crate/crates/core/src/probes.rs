//! Flatness measurements at a parameter point.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{activation_pattern, forward_loss, grad, grad_with_pattern, ActivationPattern, PassCount};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::ModelSpec;
use crate::optim::{compute_perturbation, Direction, StepStats, DEFAULT_ZERO_GRAD_EPS};
use crate::params::ParamVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessEstimate {
    pub value: f64,
    /// The gradient vanished, so no perturbation direction exists.
    pub degenerate: bool,
}

/// MaxS, MinS and BilS at one point, plus the top of the Hessian spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessReport {
    /// `L(w)` on the probe batch.
    pub loss: f64,
    pub max_s: f64,
    pub min_s: f64,
    /// `L(w + ε̂_max) − L(w + ε̂_min)`.
    pub bil_s: f64,
    pub rho_used: f64,
    pub degenerate: bool,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub eig_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    pub k: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            k: 1,
            iters: 1000,
            tol: 1e-6,
            seed: 0,
        }
    }
}

fn perturbed_loss(
    params: &ParamVector,
    g: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    rho: f64,
    direction: Direction,
    passes: &mut PassCount,
) -> Result<f64> {
    let eps = compute_perturbation(g, rho, direction, 2.0, DEFAULT_ZERO_GRAD_EPS)?;
    forward_loss(&params.add_scaled(1.0, &eps)?, batch, spec, passes)
}

fn sharpness(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    rho: f64,
    direction: Direction,
) -> Result<SharpnessEstimate> {
    if !(rho >= 0.0) {
        return Err(Error::Range {
            what: "rho",
            value: rho,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let mut passes = PassCount::new();
    let (l0, g) = grad(params, batch, spec, &mut passes)?;
    if g.norm() <= DEFAULT_ZERO_GRAD_EPS {
        return Ok(SharpnessEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    let l1 = perturbed_loss(params, &g, batch, spec, rho, direction, &mut passes)?;
    let value = match direction {
        Direction::Ascent => l1 - l0,
        Direction::Descent => l0 - l1,
    };
    Ok(SharpnessEstimate {
        value,
        degenerate: false,
    })
}

/// `L(w + ε̂_max) − L(w)` at the first-order ascent perturbation.
pub fn max_sharpness(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    rho: f64,
) -> Result<SharpnessEstimate> {
    sharpness(params, batch, spec, rho, Direction::Ascent)
}

/// `L(w) − L(w + ε̂_min)` at the first-order descent perturbation.
pub fn min_sharpness(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    rho: f64,
) -> Result<SharpnessEstimate> {
    sharpness(params, batch, spec, rho, Direction::Descent)
}

/// Full report with one shared radius for both sides.
pub fn sharpness_report(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    rho: f64,
    eig: &EigenOptions,
) -> Result<SharpnessReport> {
    let mut passes = PassCount::new();
    let (l0, g) = grad(params, batch, spec, &mut passes)?;
    let degenerate = g.norm() <= DEFAULT_ZERO_GRAD_EPS;
    let (l_max, l_min) = if degenerate {
        (l0, l0)
    } else {
        (
            perturbed_loss(params, &g, batch, spec, rho, Direction::Ascent, &mut passes)?,
            perturbed_loss(params, &g, batch, spec, rho, Direction::Descent, &mut passes)?,
        )
    };
    let pairs = if eig.k == 0 {
        Vec::new()
    } else {
        top_eigenvalues(params, batch, spec, eig)?
    };
    Ok(SharpnessReport {
        loss: l0,
        max_s: l_max - l0,
        min_s: l0 - l_min,
        bil_s: l_max - l_min,
        rho_used: rho,
        degenerate,
        eigenvalues: pairs.iter().map(|p| p.value).collect(),
        eig_residuals: pairs.iter().map(|p| p.residual).collect(),
    })
}

/// Step used for central-difference Hessian-vector products.
pub fn default_hvp_step(params: &ParamVector) -> f64 {
    1e-4 * params.norm().max(1.0)
}

/// The ReLU pattern at `params`, or `None` for analytic landscapes.
pub fn pattern_at(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<Option<ActivationPattern>> {
    match spec {
        ModelSpec::Mlp(m) => {
            spec.check_params(params)?;
            spec.check_batch(batch)?;
            Ok(Some(activation_pattern(params, m, &batch.features)?))
        }
        _ => Ok(None),
    }
}

/// `(∇L(w + h v̂) − ∇L(w − h v̂)) / 2h · ‖v‖`.
///
/// For MLPs both gradients keep the ReLU pattern of `w`. Otherwise a
/// preactivation crossing zero inside `[w − h v̂, w + h v̂]` adds a gradient
/// jump divided by `2h`, which on a batch of hundreds of samples swamps the
/// curvature being measured.
pub fn hvp(
    params: &ParamVector,
    v: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    h: f64,
) -> Result<ParamVector> {
    let pattern = pattern_at(params, batch, spec)?;
    hvp_with_pattern(params, v, batch, spec, h, pattern.as_ref())
}

fn hvp_with_pattern(
    params: &ParamVector,
    v: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    h: f64,
    pattern: Option<&ActivationPattern>,
) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::dim("hvp direction", params.len(), v.len()));
    }
    let nv = v.norm();
    if !(nv > 0.0) {
        return Err(Error::Degenerate("hvp along a zero vector"));
    }
    if !(h > 0.0) {
        return Err(Error::Range {
            what: "hvp step",
            value: h,
            lo: f64::MIN_POSITIVE,
            hi: f64::MAX,
        });
    }
    let step = h / nv;
    let mut passes = PassCount::new();
    let (_, gp) = grad_with_pattern(&params.add_scaled(step, v)?, batch, spec, pattern, &mut passes)?;
    let (_, gm) = grad_with_pattern(&params.add_scaled(-step, v)?, batch, spec, pattern, &mut passes)?;
    let k = nv / (2.0 * h);
    let out = gp
        .values()
        .iter()
        .zip(gm.values())
        .map(|(a, b)| (a - b) * k)
        .collect();
    params.with_values(out)
}

/// A symmetric linear map known only through its action.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>>;
}

/// The loss Hessian at a point, through finite-difference HVPs.
pub struct HessianOperator<'a> {
    params: &'a ParamVector,
    batch: &'a Batch,
    spec: &'a ModelSpec,
    h: f64,
    pattern: Option<ActivationPattern>,
}

impl<'a> HessianOperator<'a> {
    pub fn new(params: &'a ParamVector, batch: &'a Batch, spec: &'a ModelSpec, h: f64) -> Result<Self> {
        Ok(Self {
            params,
            batch,
            spec,
            h,
            pattern: pattern_at(params, batch, spec)?,
        })
    }
}

impl SymmetricOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        let v = self.params.with_values(v.to_vec())?;
        Ok(hvp_with_pattern(self.params, &v, self.batch, self.spec, self.h, self.pattern.as_ref())?.into_values())
    }
}

/// Dense row-major symmetric matrix.
pub struct DenseOperator<'a> {
    pub matrix: &'a [f64],
    pub n: usize,
}

impl SymmetricOperator for DenseOperator<'_> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::sym_matvec(self.matrix, self.n, v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    /// `‖Hv − λv‖ / |λ|`.
    pub residual: f64,
    pub vector: Vec<f64>,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = linalg::norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = linalg::dot(v, b);
        linalg::axpy(-c, b, v);
    }
}

fn random_unit(dim: usize, seed: u64, index: u64, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut rng = rng::indexed_stream(seed, "eigen-start", index);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    project_out(&mut v, basis);
    normalize(&mut v);
    v
}

fn relative_residual(hv: &[f64], v: &[f64], lambda: f64) -> f64 {
    let r: f64 = hv
        .iter()
        .zip(v)
        .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
        .sum();
    libm::sqrt(r) / lambda.abs().max(f64::MIN_POSITIVE)
}

/// Power iteration on `(H + shift·I)` restricted to the complement of
/// `basis`. Returns the unshifted Rayleigh quotient, its vector and the
/// operator image `Hv`.
fn power_iterate<O: SymmetricOperator>(
    op: &mut O,
    shift: f64,
    basis: &[Vec<f64>],
    start: Vec<f64>,
    iters: usize,
    tol: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut v = start;
    let mut hv = op.apply(&v)?;
    let mut lambda = linalg::dot(&v, &hv);
    for _ in 0..iters {
        if relative_residual(&hv, &v, lambda) <= tol {
            break;
        }
        let mut next: Vec<f64> = hv.iter().zip(&v).map(|(a, b)| a + shift * b).collect();
        project_out(&mut next, basis);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
        hv = op.apply(&v)?;
        lambda = linalg::dot(&v, &hv);
    }
    Ok((lambda, v, hv))
}

/// Top-`k` algebraic eigenpairs of a symmetric operator by power iteration
/// with projection deflation.
///
/// Plain power iteration converges to the largest *magnitude* eigenvalue, so
/// when the spectrum may be indefinite the operator is first shifted by the
/// magnitude of its most negative eigenvalue estimate, making the wanted
/// eigenvalues dominant. Each pair stops at `residual ≤ tol` or after `iters`
/// iterations; the achieved residual is always reported.
pub fn top_eigenpairs<O: SymmetricOperator>(op: &mut O, opts: &EigenOptions) -> Result<Vec<Eigenpair>> {
    let dim = op.dim();
    if opts.k < 1 || opts.iters < 1 {
        return Err(Error::config("eigen probe needs k >= 1 and iters >= 1"));
    }
    if opts.k > dim {
        return Err(Error::Range {
            what: "eigenvalue count k",
            value: opts.k as f64,
            lo: 1.0,
            hi: dim as f64,
        });
    }
    let (dominant, v0, hv0) =
        power_iterate(op, 0.0, &[], random_unit(dim, opts.seed, 0, &[]), opts.iters, opts.tol)?;
    let shift = if dominant < 0.0 {
        -dominant
    } else if opts.k == 1 {
        let residual = relative_residual(&hv0, &v0, dominant);
        return Ok(vec![Eigenpair {
            value: dominant,
            residual,
            vector: v0,
        }]);
    } else {
        // most negative eigenvalue of H is the dominant one of H − dominant·I
        let (low, _, _) = power_iterate(
            op,
            -dominant,
            &[],
            random_unit(dim, opts.seed, 1, &[]),
            opts.iters,
            opts.tol,
        )?;
        (-low).max(0.0)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(opts.k);
    let mut pairs = Vec::with_capacity(opts.k);
    for i in 0..opts.k {
        let start = random_unit(dim, opts.seed, 2 + i as u64, &basis);
        let (lambda, v, hv) = power_iterate(op, shift, &basis, start, opts.iters, opts.tol)?;
        pairs.push(Eigenpair {
            value: lambda,
            residual: relative_residual(&hv, &v, lambda),
            vector: v.clone(),
        });
        basis.push(v);
    }
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(pairs)
}

/// Top-`k` Hessian eigenvalues at `params`, as `(λ, residual)` pairs.
pub fn top_eigenvalues(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    opts: &EigenOptions,
) -> Result<Vec<Eigenpair>> {
    let mut op = HessianOperator::new(params, batch, spec, default_hvp_step(params))?;
    top_eigenpairs(&mut op, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineSummary {
    /// Mean `cos(g, g_min)` per tenth of the trace; `None` if that tenth
    /// holds no cosine values.
    pub decile_means: Vec<Option<f64>>,
    /// Share of final-decile steps with a negative cosine.
    pub final_negative_fraction: f64,
}

impl CosineSummary {
    pub fn first(&self) -> Option<f64> {
        self.decile_means.iter().find_map(|m| *m)
    }

    pub fn last(&self) -> Option<f64> {
        self.decile_means.iter().rev().find_map(|m| *m)
    }
}

/// Per-decile mean of `cos(g, g_min)` over a step trace.
pub fn cosine_diagnostic(trace: &[StepStats]) -> Result<CosineSummary> {
    if trace.is_empty() {
        return Err(Error::Degenerate("empty step trace"));
    }
    let n = trace.len();
    let mut sums = [0.0f64; 10];
    let mut counts = [0usize; 10];
    let mut negatives = 0usize;
    for (i, s) in trace.iter().enumerate() {
        if let Some(c) = s.cos_g_gmin {
            let d = (i * 10 / n).min(9);
            sums[d] += c;
            counts[d] += 1;
            if d == 9 && c < 0.0 {
                negatives += 1;
            }
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Degenerate("step trace carries no cosine values"));
    }
    let decile_means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    let final_negative_fraction = if counts[9] > 0 {
        negatives as f64 / counts[9] as f64
    } else {
        0.0
    };
    Ok(CosineSummary {
        decile_means,
        final_negative_fraction,
    })
}

/// Loss over a symmetric 2-D grid of offsets around `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSlice {
    /// Shared α/β coordinates, from −extent to extent.
    pub coords: Vec<f64>,
    /// Row-major, `values[i * grid + j] = L(w + αᵢ d1 + βⱼ d2)`.
    pub values: Vec<f64>,
}

impl LossSlice {
    pub fn grid(&self) -> usize {
        self.coords.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid() + j]
    }

    pub fn center(&self) -> f64 {
        let m = self.grid() / 2;
        self.at(m, m)
    }
}

/// Rescales every layout segment of `d` to the norm of the matching segment
/// of `params`. Segments where either side is zero become zero.
pub fn filter_normalize(d: &ParamVector, params: &ParamVector) -> Result<ParamVector> {
    if d.len() != params.len() {
        return Err(Error::dim("slice direction", params.len(), d.len()));
    }
    let mut out = d.values().to_vec();
    for seg in params.layout() {
        let wn = linalg::norm2(params.segment_values(seg));
        let r = seg.range();
        let dn = linalg::norm2(&out[r.clone()]);
        let k = if dn > 0.0 { wn / dn } else { 0.0 };
        out[r].iter_mut().for_each(|x| *x *= k);
    }
    params.with_values(out)
}

/// Two Gaussian directions for [`loss_slice`].
pub fn random_directions(params: &ParamVector, seed: u64) -> (ParamVector, ParamVector) {
    let draw = |purpose: &str| {
        let mut rng = rng::stream(seed, purpose);
        let v = (0..params.len()).map(|_| rng.sample(StandardNormal)).collect();
        params.with_values(v).expect("same length")
    };
    (draw("slice-d1"), draw("slice-d2"))
}

/// Filter-normalized, orthogonalized 2-D loss slice.
///
/// Both directions are filter-normalized first; `d2` is then projected off
/// `d1` (Gram–Schmidt) and rescaled to its pre-projection norm.
pub fn loss_slice(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    d1: &ParamVector,
    d2: &ParamVector,
    grid: usize,
    extent: f64,
) -> Result<LossSlice> {
    if grid < 3 || grid.is_multiple_of(2) {
        return Err(Error::config("slice grid must be odd and at least 3"));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::config("slice extent must be positive"));
    }
    let u = filter_normalize(d1, params)?;
    let mut v = filter_normalize(d2, params)?.into_values();
    let uu = linalg::dot(u.values(), u.values());
    if !(uu > 0.0) {
        return Err(Error::Degenerate("first slice direction vanishes after normalization"));
    }
    let before = linalg::norm2(&v);
    let c = linalg::dot(&v, u.values()) / uu;
    linalg::axpy(-c, u.values(), &mut v);
    let after = linalg::norm2(&v);
    if !(after > 1e-10 * before) {
        return Err(Error::Degenerate("slice directions are parallel"));
    }
    v.iter_mut().for_each(|x| *x *= before / after);

    let half = (grid - 1) as f64;
    let coords: Vec<f64> = (0..grid)
        .map(|i| extent * (2.0 * i as f64 - half) / half)
        .collect();
    let mut passes = PassCount::new();
    let mut point = params.clone();
    let mut values = Vec::with_capacity(grid * grid);
    for &a in &coords {
        for &b in &coords {
            for (k, p) in point.values_mut().iter_mut().enumerate() {
                *p = params.values()[k] + a * u.values()[k] + b * v[k];
            }
            values.push(forward_loss(&point, batch, spec, &mut passes)?);
        }
    }
    Ok(LossSlice { coords, values })
}
