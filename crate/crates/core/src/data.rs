//! Labeled feature matrices, label remapping and z-score normalization.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Original label value of each remapped class id, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap(pub Vec<i64>);

impl LabelMap {
    pub fn from_labels(raw: &[i64]) -> Self {
        let mut v = raw.to_vec();
        v.sort_unstable();
        v.dedup();
        LabelMap(v)
    }

    /// Identity map over `0..classes`.
    pub fn identity(classes: usize) -> Self {
        LabelMap((0..classes as i64).collect())
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn encode(&self, raw: i64) -> Option<usize> {
        self.0.binary_search(&raw).ok()
    }

    pub fn decode(&self, class: usize) -> i64 {
        self.0[class]
    }
}

/// N×d features with class ids in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    label_map: LabelMap,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, label_map: LabelMap) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Validation(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let classes = label_map.classes();
        if classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, found {classes}"
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature in row {}",
                pos / dim
            )));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            label_map,
        })
    }

    /// Builds a dataset whose labels are already class ids `0..classes`.
    pub fn from_classes(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Dataset::new(features, dim, labels, LabelMap::identity(classes))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.label_map.classes()
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for l in &self.labels {
            counts[*l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_map: self.label_map.clone(),
        }
    }

    /// Appends rows that share this dataset's label map.
    pub fn push_row(&mut self, row: &[f64], label: usize) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dim("push_row", &[self.dim], &[row.len()]));
        }
        if label >= self.classes() {
            return Err(Error::Validation(format!("label {label} out of range")));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    /// Shuffled split into `(train, test)` with `round(test_fraction·N)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Parameter(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "split", &[]));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Per-feature mean and population standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len().max(1) as f64, train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        NormStats { mean, std }
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// z-scores a row in place; zero-variance features map to 0.
    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
        }
    }

    /// Maps a z-scored row back to raw scale.
    pub fn invert_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = if *s > 0.0 { *v * s + m } else { *m };
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.dim() {
            return Err(Error::dim("normalize", &[self.dim()], &[data.dim()]));
        }
        let mut features = data.features.clone();
        for row in features.chunks_mut(data.dim) {
            self.apply_row(row);
        }
        Ok(Dataset {
            features,
            ..data.clone()
        })
    }
}

/// Synthetic datasets used by tests, benchmarks and demos.
pub mod synth {
    use super::*;

    /// Two isotropic unit-variance Gaussians whose means are `separation`
    /// apart along the all-ones direction. `counts[c]` rows of class `c`,
    /// classes interleaved in row order.
    pub fn two_gaussians(counts: [usize; 2], dim: usize, separation: f64, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, "two-gaussians", &[]);
        let shift = separation / (dim as f64).sqrt();
        let mut labels: Vec<usize> = std::iter::repeat_n(0, counts[0])
            .chain(std::iter::repeat_n(1, counts[1]))
            .collect();
        labels.shuffle(&mut r);
        let mut features = Vec::with_capacity(labels.len() * dim);
        for &l in &labels {
            for _ in 0..dim {
                let z: f64 = r.sample(StandardNormal);
                features.push(z + if l == 1 { shift } else { 0.0 });
            }
        }
        Dataset::from_classes(features, dim, labels, 2).expect("valid synthetic data")
    }

    /// Standard-normal points with uniformly random labels.
    pub fn gaussian_points(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, "gaussian-points", &[]);
        let features = (0..n * dim).map(|_| r.sample(StandardNormal)).collect();
        let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
        Dataset::from_classes(features, dim, labels, classes).expect("valid synthetic data")
    }
}
