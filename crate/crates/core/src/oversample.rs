//! Minority-class synthesis: model-based, SMOTE and ADASYN.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::knn::query_neighbors;
use crate::rng;
use crate::train::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Model,
    Smote,
    Adasyn,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::Smote => "smote",
            Method::Adasyn => "adasyn",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "model" => Ok(Method::Model),
            "smote" => Ok(Method::Smote),
            "adasyn" => Ok(Method::Adasyn),
            _ => Err(Error::Usage(format!(
                "unknown oversampling method {s}; expected model, smote or adasyn"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OversampleConfig {
    pub method: Method,
    /// Synthetic vectors per source for the model method.
    pub k: usize,
    /// Neighbor count for SMOTE and ADASYN.
    pub smote_k: usize,
    pub seed: u64,
    /// Target class size as a fraction of the largest class.
    pub ratio: f64,
}

impl OversampleConfig {
    pub fn new(method: Method) -> Self {
        OversampleConfig {
            method,
            k: 5,
            smote_k: 5,
            seed: 0,
            ratio: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.smote_k == 0 {
            return Err(Error::Parameter("K and the SMOTE neighbor count must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Parameter(format!("balance ratio must lie in (0, 1], got {}", self.ratio)));
        }
        Ok(())
    }
}

/// Where a row of an augmented dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Original,
    /// Generated from training row `source`; `rank` counts from 1 per source.
    Synthetic { method: Method, source: usize, rank: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Original => f.write_str("original"),
            Origin::Synthetic { method, source, rank } => {
                write!(f, "{}:{source}:{rank}", method.tag())
            }
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Origin::Original);
        }
        let bad = || Error::Validation(format!("malformed origin tag {s}"));
        let mut parts = s.split(':');
        let method = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let source = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let rank = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Origin::Synthetic { method, source, rank })
    }
}

/// Original rows followed by synthetic rows, each tagged with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub data: Dataset,
    pub origins: Vec<Origin>,
}

impl AugmentedDataset {
    pub fn synthetic_count(&self) -> usize {
        self.origins.iter().filter(|o| **o != Origin::Original).count()
    }

    fn start(train: &Dataset) -> Self {
        AugmentedDataset {
            data: train.clone(),
            origins: vec![Origin::Original; train.len()],
        }
    }
}

/// Per-class number of rows still needed to reach the balance target.
fn deficits(train: &Dataset, ratio: f64) -> Vec<usize> {
    let counts = train.class_counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    let target = (ratio * max as f64).round() as usize;
    counts.iter().map(|c| target.saturating_sub(*c)).collect()
}

/// Synthesizes minority rows from a vector-predicting model. `train` is in
/// raw feature scale; synthetic rows are written back in raw scale.
pub fn generate_synthetic_model(model: &Checkpoint, train: &Dataset, cfg: &OversampleConfig) -> Result<AugmentedDataset> {
    cfg.validate()?;
    if !model.kind().has_vectors() || !model.kind().has_labels() {
        return Err(Error::Validation(format!(
            "{} does not predict both vectors and labels; use v2vsls or mnknn_vec",
            model.kind()
        )));
    }
    if model.config.d != train.dim() || model.config.classes != train.classes() {
        return Err(Error::dim(
            "oversample model",
            &[model.config.d, model.config.classes],
            &[train.dim(), train.classes()],
        ));
    }
    let mut need = deficits(train, cfg.ratio);
    let mut out = AugmentedDataset::start(train);
    let sources: Vec<usize> = (0..train.len()).filter(|&i| need[train.label(i)] > 0).collect();
    if sources.is_empty() {
        return Ok(out);
    }
    let normalized = model.norm.apply(train)?;
    let net = model.model()?;
    let predictor = Predictor::new(&net, &normalized, cfg.seed);
    let bundles = predictor.reference_bundles(&sources)?;
    for (&src, bundle) in sources.iter().zip(&bundles) {
        if need.iter().all(|n| *n == 0) {
            break;
        }
        for (t, (dist, vector)) in bundle.steps.iter().zip(&bundle.vectors).enumerate().take(cfg.k) {
            let class = argmax(dist);
            if need[class] == 0 {
                continue;
            }
            let mut row = vector.clone();
            model.norm.invert_row(&mut row);
            out.data.push_row(&row, class)?;
            out.origins.push(Origin::Synthetic {
                method: Method::Model,
                source: src,
                rank: t + 1,
            });
            need[class] -= 1;
        }
    }
    Ok(out)
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
}

/// `x_i + u·(x_z − x_i)`.
pub fn interpolate(xi: &[f64], xz: &[f64], u: f64) -> Vec<f64> {
    xi.iter().zip(xz).map(|(a, b)| a + u * (b - a)).collect()
}

/// Rows of one class and their `smote_k` nearest same-class neighbors
/// (positions within the class), found on z-scored features.
struct ClassNeighborhood {
    rows: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

fn class_neighborhood(train: &Dataset, norm: &NormStats, class: usize, smote_k: usize) -> Result<ClassNeighborhood> {
    let rows: Vec<usize> = (0..train.len()).filter(|&i| train.label(i) == class).collect();
    if rows.len() < smote_k + 1 {
        return Err(Error::InsufficientCandidates {
            required: smote_k + 1,
            available: rows.len(),
        });
    }
    let members = norm.apply(&train.subset(&rows))?;
    let neighbors = (0..members.len())
        .map(|i| {
            Ok(query_neighbors(&members, members.row(i), smote_k, Some(i))?
                .into_iter()
                .map(|c| c.index)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassNeighborhood { rows, neighbors })
}

fn emit<R: Rng>(
    out: &mut AugmentedDataset,
    train: &Dataset,
    hood: &ClassNeighborhood,
    pos: usize,
    rank: usize,
    method: Method,
    rng: &mut R,
) -> Result<()> {
    let src = hood.rows[pos];
    let z = hood.neighbors[pos][rng.random_range(0..hood.neighbors[pos].len())];
    let u: f64 = rng.random_range(0.0..=1.0);
    let row = interpolate(train.row(src), train.row(hood.rows[z]), u);
    out.data.push_row(&row, train.label(src))?;
    out.origins.push(Origin::Synthetic { method, source: src, rank });
    Ok(())
}

/// SMOTE: sources are visited round-robin in index order until each
/// minority class reaches the balance target.
pub fn smote(train: &Dataset, cfg: &OversampleConfig) -> Result<AugmentedDataset> {
    cfg.validate()?;
    let norm = NormStats::fit(train);
    let need = deficits(train, cfg.ratio);
    let mut out = AugmentedDataset::start(train);
    for (class, &n) in need.iter().enumerate().filter(|(_, n)| **n > 0) {
        let hood = class_neighborhood(train, &norm, class, cfg.smote_k)?;
        let mut r = rng::stream(cfg.seed, "smote", &[class as u64]);
        let m = hood.rows.len();
        for s in 0..n {
            emit(&mut out, train, &hood, s % m, s / m + 1, Method::Smote, &mut r)?;
        }
    }
    Ok(out)
}

/// Per-sample ADASYN budgets `round(r_i / Σr · G)`. Returns the budgets and
/// whether the uniform fallback was used because every `r_i` is zero.
pub fn adasyn_allocation(r: &[f64], g: usize) -> (Vec<usize>, bool) {
    let total: f64 = r.iter().sum();
    if r.is_empty() {
        return (Vec::new(), false);
    }
    if total <= 0.0 {
        let each = g as f64 / r.len() as f64;
        return (r.iter().map(|_| each.round() as usize).collect(), true);
    }
    (r.iter().map(|v| (v / total * g as f64).round() as usize).collect(), false)
}

/// ADASYN: budgets follow each minority sample's share of other-class
/// neighbors among its `smote_k` nearest rows of the whole set.
pub fn adasyn(train: &Dataset, cfg: &OversampleConfig) -> Result<AugmentedDataset> {
    cfg.validate()?;
    let norm = NormStats::fit(train);
    let whole = norm.apply(train)?;
    let need = deficits(train, cfg.ratio);
    let mut out = AugmentedDataset::start(train);
    for (class, &g) in need.iter().enumerate().filter(|(_, n)| **n > 0) {
        let hood = class_neighborhood(train, &norm, class, cfg.smote_k)?;
        let ratios = hood
            .rows
            .iter()
            .map(|&i| {
                let nn = query_neighbors(&whole, whole.row(i), cfg.smote_k, Some(i))?;
                Ok(nn.iter().filter(|c| c.label != class).count() as f64 / cfg.smote_k as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let (budget, fallback) = adasyn_allocation(&ratios, g);
        if fallback {
            log::warn!("class {class}: no minority sample borders another class; allocating ADASYN budget uniformly");
        }
        let mut r = rng::stream(cfg.seed, "adasyn", &[class as u64]);
        for (pos, &b) in budget.iter().enumerate() {
            for rank in 1..=b {
                emit(&mut out, train, &hood, pos, rank, Method::Adasyn, &mut r)?;
            }
        }
    }
    Ok(out)
}

pub fn oversample(train: &Dataset, model: Option<&Checkpoint>, cfg: &OversampleConfig) -> Result<AugmentedDataset> {
    match cfg.method {
        Method::Smote => smote(train, cfg),
        Method::Adasyn => adasyn(train, cfg),
        Method::Model => {
            let m = model.ok_or_else(|| Error::Usage("the model method needs a checkpoint".into()))?;
            generate_synthetic_model(m, train, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn interpolation_endpoints() {
        assert_eq!(interpolate(&[1.0, 2.0], &[3.0, -2.0], 0.0), vec![1.0, 2.0]);
        assert_eq!(interpolate(&[1.0, 2.0], &[3.0, -2.0], 1.0), vec![3.0, -2.0]);
    }

    #[test]
    fn smote_two_point_minority() {
        let mut features = vec![0.0, 0.0, 1.0, 0.0];
        let mut labels = vec![1, 1];
        for i in 0..6 {
            features.extend_from_slice(&[i as f64, 5.0 + i as f64]);
            labels.push(0);
        }
        let ds = Dataset::from_classes(features, 2, labels, 2).unwrap();
        let mut cfg = OversampleConfig::new(Method::Smote);
        cfg.smote_k = 1;
        let aug = smote(&ds, &cfg).unwrap();
        assert_eq!(aug.data.class_counts(), vec![6, 6]);
        for i in ds.len()..aug.data.len() {
            assert_eq!(aug.data.row(i)[1], 0.0);
            assert_eq!(aug.data.label(i), 1);
        }
        cfg.smote_k = 2;
        assert!(smote(&ds, &cfg).is_err());
    }

    #[test]
    fn smote_points_lie_on_segments() {
        let ds = synth::two_gaussians([200, 20], 3, 1.5, 3);
        let aug = smote(&ds, &OversampleConfig::new(Method::Smote)).unwrap();
        assert_eq!(aug.synthetic_count(), 180);
        for i in ds.len()..aug.data.len() {
            let s = aug.data.row(i);
            let Origin::Synthetic { source, .. } = aug.origins[i] else { panic!() };
            let xi = ds.row(source);
            let ok = (0..ds.len()).filter(|&z| ds.label(z) == 1).any(|z| {
                let xz = ds.row(z);
                (dist(s, xi) + dist(s, xz) - dist(xi, xz)).abs() < 1e-9
            });
            assert!(ok);
        }
    }

    #[test]
    fn balanced_input_needs_nothing() {
        let ds = synth::two_gaussians([20, 20], 2, 1.0, 1);
        for m in [Method::Smote, Method::Adasyn] {
            assert_eq!(oversample(&ds, None, &OversampleConfig::new(m)).unwrap().synthetic_count(), 0);
        }
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(adasyn_allocation(&[0.2, 0.8], 10), (vec![2, 8], false));
        assert_eq!(adasyn_allocation(&[0.0, 0.0], 10), (vec![5, 5], true));
        let (b, _) = adasyn_allocation(&[0.0, 0.4, 0.6], 7);
        assert_eq!(b[0], 0);
        let r = [0.1, 0.3, 0.3, 0.2, 0.6, 0.2, 0.2];
        let (b, _) = adasyn_allocation(&r, 101);
        let sum: usize = b.iter().sum();
        assert!(sum.abs_diff(101) <= r.len());
    }

    #[test]
    fn adasyn_is_deterministic_and_minority_only() {
        let ds = synth::two_gaussians([150, 20], 2, 1.5, 5);
        let cfg = OversampleConfig::new(Method::Adasyn);
        let a = adasyn(&ds, &cfg).unwrap();
        assert_eq!(a, adasyn(&ds, &cfg).unwrap());
        assert!((ds.len()..a.data.len()).all(|i| a.data.label(i) == 1));
        assert!(a.synthetic_count().abs_diff(130) <= 20);
    }

    #[test]
    fn origin_tags_round_trip() {
        for o in [
            Origin::Original,
            Origin::Synthetic {
                method: Method::Adasyn,
                source: 12,
                rank: 3,
            },
        ] {
            assert_eq!(o.to_string().parse::<Origin>().unwrap(), o);
        }
        assert!("smote:1".parse::<Origin>().is_err());
    }
}
