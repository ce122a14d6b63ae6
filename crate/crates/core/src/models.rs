//! The trainable MLP family and analytic landscapes with known curvature.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::params::{ParamVector, Segment};
use crate::rng;

/// Largest dense quadratic fixture.
pub const MAX_QUADRATIC_DIM: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Quadratic(QuadraticSpec),
    DoubleWell(DoubleWellSpec),
}

/// ReLU MLP. `layer_sizes` runs from input width to the logit width, which
/// equals `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    classes: usize,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, classes: usize) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("MLP layer sizes must be positive"));
        }
        if classes < 2 {
            return Err(Error::config("an MLP classifier needs at least two classes"));
        }
        if *layer_sizes.last().unwrap() != classes {
            return Err(Error::config(format!(
                "last layer width {} differs from class count {}",
                layer_sizes.last().unwrap(),
                classes
            )));
        }
        Ok(Self {
            layer_sizes,
            classes,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            layout.push(Segment {
                name: format!("layer{i}.weight"),
                offset,
                shape: vec![w[0], w[1]],
            });
            offset += w[0] * w[1];
            layout.push(Segment {
                name: format!("layer{i}.bias"),
                offset,
                shape: vec![w[1]],
            });
            offset += w[1];
        }
        layout
    }
}

/// `½ (w − w*)ᵀ H (w − w*)` with a dense symmetric PSD `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    dim: usize,
    hessian: Vec<f64>,
    center: Vec<f64>,
}

impl QuadraticSpec {
    pub fn new(dim: usize, hessian: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_QUADRATIC_DIM {
            return Err(Error::config(format!(
                "quadratic dimension must be in 1..={MAX_QUADRATIC_DIM}"
            )));
        }
        if hessian.len() != dim * dim {
            return Err(Error::dim("quadratic matrix", dim * dim, hessian.len()));
        }
        if center.len() != dim {
            return Err(Error::dim("quadratic center", dim, center.len()));
        }
        if !hessian.iter().chain(&center).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("quadratic fixture"));
        }
        for i in 0..dim {
            for j in i + 1..dim {
                if (hessian[i * dim + j] - hessian[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::config("quadratic matrix is not symmetric"));
                }
            }
        }
        let scale = hessian.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let eig = linalg::symmetric_eigenvalues(&hessian, dim);
        if *eig.last().unwrap() < -1e-12 * scale {
            return Err(Error::config("quadratic matrix has a negative eigenvalue"));
        }
        Ok(Self {
            dim,
            hessian,
            center,
        })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut h = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            h[i * n + i] = d;
        }
        Self::new(n, h, vec![0.0; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Smoothness constant of the landscape.
    pub fn lambda_max(&self) -> f64 {
        linalg::symmetric_eigenvalues(&self.hessian, self.dim)[0]
    }

    fn value_at_offset(&self, d: &[f64]) -> f64 {
        0.5 * linalg::dot(d, &linalg::sym_matvec(&self.hessian, self.dim, d))
    }
}

/// One-dimensional landscape with a sharp minimum at `sharp_at` and a flat
/// one at `flat_at`, both with value 0.
///
/// Let `u` be the signed distance from the sharp minimum toward the flat one,
/// `D = |flat_at − sharp_at|`, `r = √(κ_sharp/κ_flat)`, `h_s = D/(1+r)` and
/// `h_f = r·h_s`. Piecewise in `u`:
///
/// ```text
///   u ≤ 0          ½κ_s u²
///   0 < u ≤ h_s    ½κ_s u² − κ_s u³/(3h_s)        sharp bowl, capped
///   h_s < u < D    ½κ_f e² − κ_f e³/(3h_f),  e = D − u   flat bowl, capped
///   u ≥ D          ½κ_f e²
/// ```
///
/// Both caps reach their maximum `κ_s h_s²/6 = κ_f h_f²/6` with zero slope at
/// the blend point `u = h_s`, so the function is C¹ everywhere and C² except
/// there (the second derivative jumps from −κ_s to −κ_f). Curvature is
/// exactly κ_s at the sharp minimum and κ_f at the flat one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWellSpec {
    sharp_at: f64,
    flat_at: f64,
    kappa_sharp: f64,
    kappa_flat: f64,
}

impl DoubleWellSpec {
    /// Minimum curvature ratio between the two bowls.
    pub const MIN_RATIO: f64 = 10.0;

    pub fn new(sharp_at: f64, flat_at: f64, kappa_sharp: f64, kappa_flat: f64) -> Result<Self> {
        if !(sharp_at.is_finite() && flat_at.is_finite()) || sharp_at == flat_at {
            return Err(Error::config("double well minima must be finite and distinct"));
        }
        if !(kappa_flat > 0.0 && kappa_sharp.is_finite()) {
            return Err(Error::config("double well curvatures must be positive"));
        }
        if kappa_sharp < Self::MIN_RATIO * kappa_flat {
            return Err(Error::config("double well needs kappa_sharp >= 10 * kappa_flat"));
        }
        Ok(Self {
            sharp_at,
            flat_at,
            kappa_sharp,
            kappa_flat,
        })
    }

    pub fn sharp_at(&self) -> f64 {
        self.sharp_at
    }

    pub fn flat_at(&self) -> f64 {
        self.flat_at
    }

    pub fn kappa_sharp(&self) -> f64 {
        self.kappa_sharp
    }

    pub fn kappa_flat(&self) -> f64 {
        self.kappa_flat
    }

    fn geometry(&self) -> (f64, f64, f64, f64) {
        let dir = if self.flat_at > self.sharp_at { 1.0 } else { -1.0 };
        let span = (self.flat_at - self.sharp_at).abs();
        let hs = span / (1.0 + math::sqrt(self.kappa_sharp / self.kappa_flat));
        (dir, span, hs, span - hs)
    }

    /// Location of the barrier top where the two bowls meet.
    pub fn blend_point(&self) -> f64 {
        let (dir, _, hs, _) = self.geometry();
        self.sharp_at + dir * hs
    }

    pub fn barrier_height(&self) -> f64 {
        let (_, _, hs, _) = self.geometry();
        self.kappa_sharp * hs * hs / 6.0
    }

    pub fn value(&self, w: f64) -> f64 {
        let (dir, span, hs, hf) = self.geometry();
        let (ks, kf) = (self.kappa_sharp, self.kappa_flat);
        let u = dir * (w - self.sharp_at);
        if u <= 0.0 {
            0.5 * ks * u * u
        } else if u <= hs {
            0.5 * ks * u * u - ks * u * u * u / (3.0 * hs)
        } else if u < span {
            let e = span - u;
            0.5 * kf * e * e - kf * e * e * e / (3.0 * hf)
        } else {
            let e = span - u;
            0.5 * kf * e * e
        }
    }

    pub fn derivative(&self, w: f64) -> f64 {
        let (dir, span, hs, hf) = self.geometry();
        let (ks, kf) = (self.kappa_sharp, self.kappa_flat);
        let u = dir * (w - self.sharp_at);
        let du = if u <= 0.0 {
            ks * u
        } else if u <= hs {
            ks * (u - u * u / hs)
        } else if u < span {
            let e = span - u;
            -kf * (e - e * e / hf)
        } else {
            kf * (u - span)
        };
        dir * du
    }
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.param_count(),
            ModelSpec::Quadratic(q) => q.dim(),
            ModelSpec::DoubleWell(_) => 1,
        }
    }

    /// Width of a batch row.
    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.input_dim(),
            other => other.param_count(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.classes(),
            _ => 1,
        }
    }

    pub fn is_landscape(&self) -> bool {
        !matches!(self, ModelSpec::Mlp(_))
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim("parameters vs model", self.param_count(), params.len()));
        }
        Ok(())
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if batch.dim() != self.input_dim() {
            return Err(Error::dim("batch width vs model input", self.input_dim(), batch.dim()));
        }
        let c = self.classes();
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= c) {
            return Err(Error::Range {
                what: "label",
                value: bad as f64,
                lo: 0.0,
                hi: (c - 1) as f64,
            });
        }
        Ok(())
    }

    /// Parameters for an analytic landscape at the point `w`.
    pub fn landscape_point(&self, w: Vec<f64>) -> Result<ParamVector> {
        if !self.is_landscape() {
            return Err(Error::config("landscape_point on an MLP spec"));
        }
        if w.len() != self.param_count() {
            return Err(Error::dim("landscape point", self.param_count(), w.len()));
        }
        Ok(ParamVector::flat(w))
    }
}

/// Seeded MLP: weights `U(−1/√fan_in, 1/√fan_in)`, biases zero.
pub fn build_mlp(layer_sizes: &[usize], classes: usize, seed: u64) -> Result<(ParamVector, ModelSpec)> {
    if layer_sizes.is_empty() {
        return Err(Error::config("empty layer list"));
    }
    let spec = MlpSpec::new(layer_sizes.to_vec(), classes)?;
    let mut rng = rng::stream(seed, "mlp-init");
    let layout = spec.layout();
    let mut values = Vec::with_capacity(spec.param_count());
    for seg in &layout {
        if seg.shape.len() == 2 {
            let bound = 1.0 / math::sqrt(seg.shape[0] as f64);
            for _ in 0..seg.len() {
                values.push(rng.random_range(-bound..bound));
            }
        } else {
            values.extend(core::iter::repeat_n(0.0, seg.len()));
        }
    }
    let params = ParamVector::new(values, layout)?;
    Ok((params, ModelSpec::Mlp(spec)))
}

fn landscape_dim_check(w: &ParamVector, dim: usize) -> Result<()> {
    if w.len() != dim {
        return Err(Error::dim("landscape parameters", dim, w.len()));
    }
    Ok(())
}

/// Unshifted quadratic loss.
pub fn quadratic_loss(w: &ParamVector, spec: &QuadraticSpec) -> Result<f64> {
    landscape_dim_check(w, spec.dim)?;
    let d: Vec<f64> = w.values().iter().zip(&spec.center).map(|(a, b)| a - b).collect();
    Ok(spec.value_at_offset(&d))
}

/// `H (w − w*)`.
pub fn quadratic_grad(w: &ParamVector, spec: &QuadraticSpec) -> Result<ParamVector> {
    landscape_dim_check(w, spec.dim)?;
    let d: Vec<f64> = w.values().iter().zip(&spec.center).map(|(a, b)| a - b).collect();
    w.with_values(linalg::sym_matvec(&spec.hessian, spec.dim, &d))
}

/// Unshifted double-well loss.
pub fn double_well_loss(w: &ParamVector, spec: &DoubleWellSpec) -> Result<f64> {
    landscape_dim_check(w, 1)?;
    Ok(spec.value(w.values()[0]))
}

/// Batch loss and, optionally, gradient of an analytic landscape: the mean
/// over samples of the landscape shifted by each row, `L(w − x_i)`.
pub(crate) fn landscape_eval(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &Batch,
    with_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    let n = batch.len() as f64;
    match spec {
        ModelSpec::Quadratic(q) => {
            let dim = q.dim;
            let mut loss = 0.0;
            let mut mean_offset = vec![0.0; dim];
            for i in 0..batch.len() {
                let x = batch.features.row(i);
                let d: Vec<f64> = (0..dim).map(|k| w.values()[k] - q.center[k] - x[k]).collect();
                loss += q.value_at_offset(&d);
                linalg::axpy(1.0 / n, &d, &mut mean_offset);
            }
            let g = if with_grad {
                Some(w.with_values(linalg::sym_matvec(&q.hessian, dim, &mean_offset))?)
            } else {
                None
            };
            Ok((loss / n, g))
        }
        ModelSpec::DoubleWell(dw) => {
            let w0 = w.values()[0];
            let mut loss = 0.0;
            let mut g = 0.0;
            for i in 0..batch.len() {
                let x = batch.features.row(i)[0];
                loss += dw.value(w0 - x);
                if with_grad {
                    g += dw.derivative(w0 - x);
                }
            }
            let g = if with_grad {
                Some(w.with_values(vec![g / n])?)
            } else {
                None
            };
            Ok((loss / n, g))
        }
        ModelSpec::Mlp(_) => Err(Error::config("landscape_eval on an MLP spec")),
    }
}

/// Stable name for log output.
pub fn kind_name(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Mlp(_) => "mlp".into(),
        ModelSpec::Quadratic(_) => "quadratic".into(),
        ModelSpec::DoubleWell(_) => "double_well".into(),
    }
}
