//! Reverse-mode differentiation on a per-evaluation tape.
//!
//! Each call to [`grad`] records the MLP forward pass on a fresh [`Tape`],
//! then walks it backwards once. Nothing persists between evaluations, so
//! the several gradient evaluations of one optimizer step are independent.
//! Analytic landscapes bypass the tape and use their closed forms.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::models::{self, MlpSpec, ModelSpec};
use crate::params::ParamVector;
use crate::tensor::Tensor;

/// Forward/backward pass counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
}

impl PassCount {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn since(&self, earlier: &PassCount) -> PassCount {
        PassCount {
            forward: self.forward - earlier.forward,
            backward: self.backward - earlier.backward,
        }
    }
}

impl core::ops::AddAssign for PassCount {
    fn add_assign(&mut self, rhs: PassCount) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Gate(Var, Vec<bool>),
    SoftmaxXent {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(Error::dim("bias width", cols, bv.len()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Multiplies `x` elementwise by a fixed 0/1 mask.
    pub fn gate(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let mut out = self.value(x).clone();
        if mask.len() != out.len() {
            return Err(Error::dim("activation mask", out.len(), mask.len()));
        }
        for (v, &on) in out.data_mut().iter_mut().zip(&mask) {
            if !on {
                *v = 0.0;
            }
        }
        Ok(self.push(out, Op::Gate(x, mask)))
    }

    /// Mean softmax cross-entropy of `logits` (b×C) against `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (b, c) = (z.rows(), z.cols());
        if labels.len() != b {
            return Err(Error::dim("cross-entropy labels", b, labels.len()));
        }
        let mut probs = z.clone();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::dim("label vs logit width", c, y + 1));
            }
            let row = &mut probs.data_mut()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - m);
                s += *v;
            }
            let zy = z.row(i)[y];
            total += math::ln(s) + m - zy;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let loss = Tensor::from_vec(vec![total / b as f64]);
        Ok(self.push(
            loss,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b)).expect("shapes checked in forward");
                    let gb = self.value(*a).t_matmul(&g).expect("shapes checked in forward");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::new(shape, gb).expect("bias shape"));
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gate(x, mask) => {
                    let mut gx = g;
                    for (gv, &on) in gx.data_mut().iter_mut().zip(mask) {
                        if !on {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                } => {
                    let upstream = g.data()[0];
                    let c = probs.cols();
                    let scale = upstream / labels.len() as f64;
                    let mut gz = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gz.data_mut()[i * c + y] -= 1.0;
                    }
                    gz.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, gz);
                }
            }
            // interior node gradients are consumed; leaves keep theirs
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

struct MlpGraph {
    tape: Tape,
    param_vars: Vec<Var>,
    logits: Var,
}

/// Which hidden ReLUs are active, per layer and sample, at one parameter
/// point. Freezing it turns the network into the smooth function that
/// agrees with it on that point's linear region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    masks: Vec<Vec<bool>>,
}

/// The ReLU pattern of an MLP at `params` on `features`; not counted.
pub fn activation_pattern(params: &ParamVector, spec: &MlpSpec, features: &Tensor) -> Result<ActivationPattern> {
    let g = record_mlp(spec, params, features, None)?;
    let masks = g
        .tape
        .nodes
        .iter()
        .filter_map(|n| match n.op {
            Op::Relu(x) => Some(g.tape.value(x).data().iter().map(|v| *v > 0.0).collect()),
            _ => None,
        })
        .collect();
    Ok(ActivationPattern { masks })
}

fn record_mlp(
    spec: &MlpSpec,
    params: &ParamVector,
    features: &Tensor,
    pattern: Option<&ActivationPattern>,
) -> Result<MlpGraph> {
    let mut tape = Tape::new();
    let mut h = tape.leaf(features.clone());
    let mut param_vars = Vec::with_capacity(params.layout().len());
    for (_, t) in params.unflatten() {
        param_vars.push(tape.leaf(t));
    }
    let layers = spec.layer_sizes().len() - 1;
    for l in 0..layers {
        let z = tape.matmul(h, param_vars[2 * l])?;
        let z = tape.add_bias(z, param_vars[2 * l + 1])?;
        h = if l + 1 == layers {
            z
        } else {
            match pattern {
                Some(p) => tape.gate(z, p.masks[l].clone())?,
                None => tape.relu(z),
            }
        };
    }
    Ok(MlpGraph {
        tape,
        param_vars,
        logits: h,
    })
}

fn check_inputs(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<()> {
    spec.check_params(params)?;
    spec.check_batch(batch)
}

/// Mean loss over the batch. Counts one forward pass.
pub fn forward_loss(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    passes: &mut PassCount,
) -> Result<f64> {
    check_inputs(params, batch, spec)?;
    passes.forward += 1;
    match spec {
        ModelSpec::Mlp(m) => {
            let mut g = record_mlp(m, params, &batch.features, None)?;
            let loss = g.tape.softmax_xent(g.logits, &batch.labels)?;
            Ok(g.tape.value(loss).data()[0])
        }
        _ => Ok(models::landscape_eval(spec, params, batch, false)?.0),
    }
}

/// Loss and gradient with respect to `params`. Counts one forward and one
/// backward pass.
pub fn grad(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    passes: &mut PassCount,
) -> Result<(f64, ParamVector)> {
    grad_with_pattern(params, batch, spec, None, passes)
}

/// [`grad`] with the hidden ReLUs of an MLP frozen to `pattern`, which must
/// come from the same batch. Analytic landscapes ignore the pattern.
pub fn grad_with_pattern(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    pattern: Option<&ActivationPattern>,
    passes: &mut PassCount,
) -> Result<(f64, ParamVector)> {
    check_inputs(params, batch, spec)?;
    passes.forward += 1;
    passes.backward += 1;
    match spec {
        ModelSpec::Mlp(m) => {
            let mut g = record_mlp(m, params, &batch.features, pattern)?;
            let loss = g.tape.softmax_xent(g.logits, &batch.labels)?;
            let grads = g.tape.backward(loss);
            let mut flat = Vec::with_capacity(params.len());
            for v in &g.param_vars {
                match &grads[v.0] {
                    Some(t) => flat.extend_from_slice(t.data()),
                    None => flat.extend(core::iter::repeat_n(0.0, g.tape.value(*v).len())),
                }
            }
            Ok((g.tape.value(loss).data()[0], params.with_values(flat)?))
        }
        _ => {
            let (loss, g) = models::landscape_eval(spec, params, batch, true)?;
            Ok((loss, g.expect("gradient requested")))
        }
    }
}

/// Raw logits (b×C) of an MLP; not counted.
pub fn logits(params: &ParamVector, spec: &MlpSpec, features: &Tensor) -> Result<Tensor> {
    if params.len() != spec.param_count() {
        return Err(Error::dim("parameters vs model", spec.param_count(), params.len()));
    }
    if features.cols() != spec.input_dim() {
        return Err(Error::dim("feature width", spec.input_dim(), features.cols()));
    }
    let g = record_mlp(spec, params, features, None)?;
    Ok(g.tape.value(g.logits).clone())
}

/// Central differences `(L(w + h eᵢ) − L(w − h eᵢ)) / 2h` per coordinate.
pub fn finite_difference_gradient(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Range {
            what: "finite-difference step",
            value: h,
            lo: f64::MIN_POSITIVE,
            hi: f64::MAX,
        });
    }
    check_inputs(params, batch, spec)?;
    let mut scratch = PassCount::new();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let w = params.values()[i];
        probe.values_mut()[i] = w + h;
        let up = forward_loss(&probe, batch, spec, &mut scratch)?;
        probe.values_mut()[i] = w - h;
        let down = forward_loss(&probe, batch, spec, &mut scratch)?;
        probe.values_mut()[i] = w;
        out.push((up - down) / (2.0 * h));
    }
    params.with_values(out)
}
