//! Split, normalize, train and score helpers for end-to-end tests.

use knnseq::data::{Dataset, NormStats};
use knnseq::eval::{baseline_knn_classify, macro_f1, BaselineMode, Predictor};
use knnseq::knn::exact_neighbors;
use knnseq::train::{train, train_ooc, Checkpoint, TargetMode, TrainConfig, TrainReport};

/// Normalized train/test halves with the training statistics.
pub struct Split {
    pub norm: NormStats,
    pub train: Dataset,
    pub test: Dataset,
}

impl Split {
    pub fn new(data: &Dataset, test_fraction: f64, seed: u64) -> Split {
        let (train, test) = data.split(test_fraction, seed).unwrap();
        let norm = NormStats::fit(&train);
        Split {
            train: norm.apply(&train).unwrap(),
            test: norm.apply(&test).unwrap(),
            norm,
        }
    }

    pub fn fit(&self, cfg: &TrainConfig) -> (Checkpoint, TrainReport) {
        match cfg.mode {
            TargetMode::Full => {
                let targets = exact_neighbors(&self.train, cfg.k).unwrap();
                train(&self.train, &self.norm, &targets, cfg).unwrap()
            }
            TargetMode::Ooc => train_ooc(&self.train, &self.norm, cfg).unwrap(),
        }
    }

    pub fn predictions(&self, ckpt: &Checkpoint, seed: u64) -> Vec<usize> {
        let model = ckpt.model().unwrap();
        Predictor::new(&model, &self.train, seed).predict_labels(&self.test).unwrap()
    }

    pub fn model_f1(&self, ckpt: &Checkpoint, seed: u64) -> f64 {
        macro_f1(&self.predictions(ckpt, seed), self.test.labels(), self.test.classes()).unwrap()
    }

    pub fn knn_f1(&self, k: usize, mode: BaselineMode) -> f64 {
        baseline_knn_classify(&self.train, &self.test, k, mode).unwrap().macro_f1
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
