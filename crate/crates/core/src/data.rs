//! Datasets, mini-batches, splits and symmetric label noise.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

/// One mini-batch: `features` is (b, d), `labels` has length b.
///
/// For analytic landscapes the rows are per-sample shifts of the landscape
/// and every label is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim("batch feature rank", 2, features.rank()));
        }
        if labels.len() != features.rows() {
            return Err(Error::dim("batch labels", features.rows(), labels.len()));
        }
        Ok(Self { features, labels })
    }

    /// A single all-zero sample of width `dim`: the unshifted landscape.
    pub fn zero_shift(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(alloc::vec![1, dim]),
            labels: alloc::vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Blobs { seed: u64 },
    Shifts { seed: u64 },
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim("dataset feature rank", 2, features.rank()));
        }
        if labels.len() != features.rows() {
            return Err(Error::dim("dataset labels", features.rows(), labels.len()));
        }
        if labels.len() < 2 {
            return Err(Error::config("a dataset needs at least two samples"));
        }
        if classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Range {
                what: "label",
                value: bad as f64,
                lo: 0.0,
                hi: (classes - 1) as f64,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same features, replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.classes, self.provenance)
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::matrix(indices.len(), d, data).expect("gathered rows are rectangular");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (f, l) = self.gather(indices);
        Self::new(f, l, self.classes, self.provenance)
    }

    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let (f, l) = self.gather(indices);
        Batch::new(f, l)
    }

    /// The first `min(n, cap)` samples as one batch.
    pub fn head_batch(&self, cap: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..self.len().min(cap.max(1))).collect();
        self.batch_of(&idx)
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Gaussian clouds with unit variance around `classes` well-separated means.
///
/// Means sit at `separation · e_c` when `classes ≤ d`; otherwise on a circle
/// in the first two coordinates with adjacent means `separation` apart (or
/// on a line when `d = 1`). Labels cycle `0, 1, …, C−1`, so class counts
/// differ by at most one.
pub fn gen_gaussian_blobs(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if d < 1 {
        return Err(Error::config("blob dimension must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::config("blobs need at least two classes"));
    }
    if n < classes {
        return Err(Error::config("blob count n must be at least the class count"));
    }
    if !(separation > 0.0) {
        return Err(Error::config("blob separation must be positive"));
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = alloc::vec![0.0; d];
            if classes <= d {
                m[c] = separation;
            } else if d >= 2 {
                let r = separation / (2.0 * math::sin(PI / classes as f64));
                let angle = 2.0 * PI * c as f64 / classes as f64;
                m[0] = r * math::cos(angle);
                m[1] = r * math::sin(angle);
            } else {
                m[0] = separation * c as f64;
            }
            m
        })
        .collect();
    let mut rng = rng::stream(seed, "blobs");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mu in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + z);
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::matrix(n, d, data)?,
        labels,
        classes,
        Provenance::Blobs { seed },
    )
}

/// `n` i.i.d. `N(0, std²)` shift vectors of width `dim`: the sample
/// population for analytic landscapes.
pub fn gen_shift_samples(n: usize, dim: usize, std: f64, seed: u64) -> Result<Dataset> {
    if dim < 1 {
        return Err(Error::config("shift dimension must be at least 1"));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::config("shift std must be finite and non-negative"));
    }
    let mut rng = rng::stream(seed, "shifts");
    let data: Vec<f64> = (0..n * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect();
    Dataset::new(
        Tensor::matrix(n, dim, data)?,
        alloc::vec![0; n],
        1,
        Provenance::Shifts { seed },
    )
}

/// Flips each label with probability `rate` to a uniformly drawn *other*
/// class.
pub fn inject_symmetric_noise(
    labels: &[usize],
    classes: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Range {
            what: "noise rate",
            value: rate,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if rate > 0.0 && classes < 2 {
        return Err(Error::config("label noise needs at least two classes"));
    }
    let mut rng = rng::stream(seed, "label-noise");
    labels
        .iter()
        .map(|&l| {
            if l >= classes {
                return Err(Error::Range {
                    what: "label",
                    value: l as f64,
                    lo: 0.0,
                    hi: (classes - 1) as f64,
                });
            }
            // one draw per label keeps the stream aligned with the input
            let u: f64 = rng.random();
            if u < rate {
                let other = rng.random_range(0..classes - 1);
                Ok(if other >= l { other + 1 } else { other })
            } else {
                Ok(l)
            }
        })
        .collect()
}

fn permutation(n: usize, seed: u64, purpose: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, purpose));
    idx
}

/// Seeded split into `(train, test)` with `round(n·test_fraction)` test
/// samples. Both parts keep at least two samples.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Range {
            what: "test fraction",
            value: test_fraction,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let n = dataset.len();
    let n_test = libm::round(n as f64 * test_fraction) as usize;
    let idx = permutation(n, seed, "split");
    let (test_idx, train_idx) = idx.split_at(n_test);
    Ok((dataset.subset(train_idx)?, dataset.subset(test_idx)?))
}

/// One epoch of mini-batches: a seeded permutation chunked into `⌈n/b⌉`
/// batches, the last possibly short.
pub fn batches(dataset: &Dataset, b: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if b < 1 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if b > dataset.len() {
        return Err(Error::config("batch size exceeds dataset size"));
    }
    let idx = permutation(dataset.len(), epoch_seed, "batch-order");
    idx.chunks(b).map(|c| dataset.batch_of(c)).collect()
}
