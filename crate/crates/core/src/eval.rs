//! Label inference, macro F-1 and plain kNN baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::knn::{ooc_query, query_neighbors, Candidate, OocConfig};
use crate::models::memnet::{gather_rows, sample_memory};
use crate::models::{Model, ModelKind, PredictionBundle};
use crate::rng;

const CHUNK: usize = 256;

/// Majority vote over `(label, distance)` pairs. Ties go to the class whose
/// voters have the smallest summed distance, then to the lower class id.
pub fn vote(voters: &[(usize, f64)], classes: usize) -> usize {
    let mut count = vec![0usize; classes];
    let mut dist = vec![0.0f64; classes];
    for &(l, d) in voters {
        count[l] += 1;
        dist[l] += d;
    }
    (0..classes)
        .filter(|c| count[*c] > 0)
        .min_by(|a, b| {
            count[*b]
                .cmp(&count[*a])
                .then(dist[*a].total_cmp(&dist[*b]))
                .then(a.cmp(b))
        })
        .unwrap_or(0)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Runs a trained model over query rows. `reference` is the normalized
/// training set supplying memory slots and V2VS voting neighbors.
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub reference: &'a Dataset,
    pub seed: u64,
    /// Independent memory batches averaged per query (memory networks).
    pub memory_draws: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, reference: &'a Dataset, seed: u64) -> Self {
        Predictor {
            model,
            reference,
            seed,
            memory_draws: 1,
        }
    }

    fn memory_for(&self, ids: &[usize], exclude_self: bool, draw: usize) -> Result<Vec<f64>> {
        let n = self.model.config().memory_size;
        let mut mem = Vec::with_capacity(ids.len() * n * self.reference.dim());
        for &i in ids {
            let mut r = rng::stream(self.seed, "eval-memory", &[i as u64, draw as u64]);
            let idx = sample_memory(self.reference.len(), n, exclude_self.then_some(i), &mut r)?;
            gather_rows(self.reference, &idx, &mut mem);
        }
        Ok(mem)
    }

    fn chunk_bundles(&self, x: &[f64], ids: &[usize], exclude_self: bool) -> Result<Vec<PredictionBundle>> {
        if !self.model.kind().is_memnet() {
            return self.model.predict_batch(x, None);
        }
        let draws = self.memory_draws.max(1);
        let mut acc: Option<Vec<PredictionBundle>> = None;
        for draw in 0..draws {
            let mem = self.memory_for(ids, exclude_self, draw)?;
            let out = self.model.predict_batch(x, Some(&mem))?;
            acc = Some(match acc {
                None => out,
                Some(mut sum) => {
                    for (s, o) in sum.iter_mut().zip(out) {
                        add_bundle(s, &o);
                    }
                    sum
                }
            });
        }
        let mut out = acc.expect("at least one draw");
        if draws > 1 {
            for b in &mut out {
                scale_bundle(b, 1.0 / draws as f64);
            }
        }
        Ok(out)
    }

    /// Evaluation-mode outputs for every query row, in row order.
    pub fn bundles(&self, queries: &Dataset) -> Result<Vec<PredictionBundle>> {
        let d = self.model.config().d;
        if queries.dim() != d {
            return Err(Error::dim("predict", &[d], &[queries.dim()]));
        }
        let ids: Vec<usize> = (0..queries.len()).collect();
        let parts = ids
            .par_chunks(CHUNK)
            .map(|c| {
                let x = &queries.features()[c[0] * d..(c[c.len() - 1] + 1) * d];
                self.chunk_bundles(x, c, false)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Outputs for rows of the reference set itself; a row never sits in
    /// its own memory batch.
    pub fn reference_bundles(&self, rows: &[usize]) -> Result<Vec<PredictionBundle>> {
        let parts = rows
            .par_chunks(CHUNK)
            .map(|c| {
                let mut x = Vec::with_capacity(c.len() * self.reference.dim());
                gather_rows(self.reference, c, &mut x);
                self.chunk_bundles(&x, c, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Class id for one bundle.
    pub fn label_of(&self, bundle: &PredictionBundle) -> Result<usize> {
        if self.model.kind() != ModelKind::V2vs {
            return Ok(argmax(&bundle.mean));
        }
        if self.reference.is_empty() {
            return Err(Error::InsufficientCandidates {
                required: 1,
                available: 0,
            });
        }
        let mut voters = Vec::with_capacity(bundle.vectors.len());
        for x in &bundle.vectors {
            let nn = query_neighbors(self.reference, x, 1, None)?;
            voters.push((nn[0].label, nn[0].distance));
        }
        Ok(vote(&voters, self.reference.classes()))
    }

    pub fn predict_labels(&self, queries: &Dataset) -> Result<Vec<usize>> {
        let bundles = self.bundles(queries)?;
        bundles.par_iter().map(|b| self.label_of(b)).collect()
    }
}

fn add_bundle(acc: &mut PredictionBundle, other: &PredictionBundle) {
    let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    add(&mut acc.mean, &other.mean);
    for (a, b) in acc.steps.iter_mut().zip(&other.steps) {
        add(a, b);
    }
    for (a, b) in acc.vectors.iter_mut().zip(&other.vectors) {
        add(a, b);
    }
}

fn scale_bundle(b: &mut PredictionBundle, s: f64) {
    let all = std::iter::once(&mut b.mean)
        .chain(b.steps.iter_mut())
        .chain(b.vectors.iter_mut());
    for v in all {
        v.iter_mut().for_each(|x| *x *= s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Classification quality on one labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn compute(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::dim("metrics", &[labels.len()], &[predictions.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Validation("cannot score an empty prediction set".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::Validation(format!(
                    "class id out of range for {classes} classes"
                )));
            }
            confusion[l][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassMetrics> = (0..classes)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64;
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Metrics {
            macro_f1,
            accuracy: ratio(correct, labels.len()),
            per_class,
            confusion,
        })
    }

    /// `key: value` report lines.
    pub fn report(&self) -> String {
        let mut s = format!("macro_f1: {:.6}\naccuracy: {:.6}\n", self.macro_f1, self.accuracy);
        for (c, m) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "class_{c}: precision={:.6} recall={:.6} f1={:.6} support={}\n",
                m.precision, m.recall, m.f1, m.support
            ));
        }
        for (c, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("confusion_{c}: {}\n", cells.join(" ")));
        }
        s
    }
}

pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    Ok(Metrics::compute(predictions, labels, classes)?.macro_f1)
}

/// Neighbor search used by the plain kNN classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    Full,
    Ooc(OocConfig),
}

/// Majority-vote kNN labels for every test row.
pub fn baseline_knn_predict(train: &Dataset, test: &Dataset, k: usize, mode: BaselineMode) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::InsufficientCandidates {
            required: k,
            available: 0,
        });
    }
    if let BaselineMode::Ooc(cfg) = mode {
        cfg.validate(k)?;
    }
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let q = test.row(i);
            let found: Vec<Candidate> = match mode {
                BaselineMode::Full => query_neighbors(train, q, k, None)?,
                BaselineMode::Ooc(cfg) => {
                    let mut r = rng::stream(cfg.seed, "baseline-ooc", &[i as u64]);
                    ooc_query(train, q, None, k, &cfg, &mut r)?
                }
            };
            let voters: Vec<(usize, f64)> = found.iter().map(|c| (c.label, c.distance)).collect();
            Ok(vote(&voters, train.classes()))
        })
        .collect()
}

pub fn baseline_knn_classify(train: &Dataset, test: &Dataset, k: usize, mode: BaselineMode) -> Result<Metrics> {
    let pred = baseline_knn_predict(train, test, k, mode)?;
    Metrics::compute(&pred, test.labels(), train.classes())
}
