//! Flat parameter vectors with a named layer layout.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable weights as one contiguous `f64` buffer.
///
/// The layout segments tile `[0, len)` in order with no gaps or overlaps; it
/// is shared between vectors derived from one another (gradients,
/// perturbations, momentum), so cloning is cheap on the layout side.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<[Segment]>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for seg in &layout {
            if seg.offset != next {
                return Err(Error::config("parameter layout has a gap or overlap"));
            }
            if seg.is_empty() {
                return Err(Error::config("parameter segment with zero length"));
            }
            next += seg.len();
        }
        if next != values.len() {
            return Err(Error::dim("parameter layout", next, values.len()));
        }
        Ok(Self {
            values,
            layout: layout.into(),
        })
    }

    /// A single segment named `w` covering every value.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = vec![Segment {
            name: "w".into(),
            offset: 0,
            shape: vec![values.len()],
        }];
        Self {
            values,
            layout: layout.into(),
        }
    }

    /// Concatenates named tensors in the given order.
    pub fn flatten(parts: &[(String, Tensor)]) -> Result<Self> {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(parts.len());
        for (name, t) in parts {
            layout.push(Segment {
                name: name.clone(),
                offset: values.len(),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
        Self::new(values, layout)
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .iter()
            .map(|seg| {
                let t = Tensor::new(seg.shape.clone(), self.values[seg.range()].to_vec())
                    .expect("layout validated on construction");
                (seg.name.clone(), t)
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dim("parameter values", self.values.len(), values.len()));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone())
    }

    fn check_len(&self, other: &ParamVector, context: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(context, self.len(), other.len()));
        }
        Ok(())
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "add_scaled")?;
        let mut out = self.clone();
        linalg::axpy(alpha, &other.values, &mut out.values);
        Ok(out)
    }

    /// In place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other, "axpy")?;
        linalg::axpy(alpha, &other.values, &mut self.values);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|x| *x *= alpha);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(linalg::dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        linalg::norm2(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Euclidean norm over the whole vector.
pub fn l2_norm(v: &ParamVector) -> f64 {
    v.norm()
}

/// `uᵀv / (‖u‖‖v‖)`; both vectors must be non-zero.
pub fn cosine_similarity(u: &ParamVector, v: &ParamVector) -> Result<f64> {
    cosine_slices(u.values(), v.values())
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_similarity", u.len(), v.len()));
    }
    let nu = linalg::norm2(u);
    let nv = linalg::norm2(v);
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::Degenerate("cosine similarity of a zero vector"));
    }
    Ok(linalg::dot(u, v) / (nu * nv))
}
