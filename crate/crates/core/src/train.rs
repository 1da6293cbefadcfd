//! Adam training loops over precomputed or per-epoch out-of-core targets.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, NormStats};
use crate::diff::{Graph, Mode, ParamStore};
use crate::error::{Error, Result};
use crate::eval::{macro_f1, Predictor};
use crate::knn::{ooc_targets_for_rows, NeighborTargets, OocConfig};
use crate::models::memnet::{gather_rows, sample_memory};
use crate::models::{BatchInput, BatchTargets, FeedMode, Model, ModelConfig, ModelKind};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `t ≥ 1`.
pub fn adam_step(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("Adam step count starts at 1".into()));
    }
    let n = value.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::dim("adam_step", &[n], &[grad.len(), m.len(), v.len()]));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        value[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam state for every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies the stored gradients of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.data().to_vec();
            let i = id.index();
            adam_step(p.value.data_mut(), &grad, &mut self.m[i], &mut self.v[i], &self.cfg, self.t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    #[default]
    Full,
    Ooc,
}

/// Every knob of a training run. Defaults follow the reference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub k: usize,
    pub mode: TargetMode,
    pub ooc_batch: usize,
    pub ooc_rounds: usize,
    pub hidden: usize,
    pub memory_size: usize,
    pub embed_dim: usize,
    pub batch_norm: bool,
    pub feed_mode: FeedMode,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        TrainConfig {
            kind,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            dropout: 0.2,
            seed: 0,
            tau: 0.85,
            alpha: 9.5,
            lambda: 0.12,
            k: 5,
            mode: TargetMode::Full,
            ooc_batch: 64,
            ooc_rounds: 50,
            hidden: 128,
            memory_size: 64,
            embed_dim: 64,
            batch_norm: true,
            feed_mode: FeedMode::Predicted,
            patience: 5,
            validation_fraction: 0.1,
        }
    }

    pub fn ooc(&self) -> OocConfig {
        OocConfig {
            batch: self.ooc_batch,
            rounds: self.ooc_rounds,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, d: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            d,
            classes,
            k: self.k,
            hidden: self.hidden,
            memory_size: self.memory_size,
            embed_dim: self.embed_dim,
            tau: self.tau,
            alpha: self.alpha,
            lambda: self.lambda,
            dropout: self.dropout,
            batch_norm: self.batch_norm,
            feed_mode: self.feed_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("minibatch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.mode == TargetMode::Ooc {
            self.ooc().validate(self.k)?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus everything needed to score raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub label_map: LabelMap,
    pub norm: NormStats,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, label_map: LabelMap, norm: NormStats) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            label_map,
            norm,
            params: model.store().clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::with_values(self.config.clone(), &self.params)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }
}

/// Per-epoch trace and wall-clock split of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss seen while each epoch ran.
    pub epoch_losses: Vec<f64>,
    /// Evaluation-mode objective over the fitting rows after each epoch.
    pub epoch_objective: Vec<f64>,
    pub validation_f1: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub target_seconds: f64,
    pub train_seconds: f64,
}

enum Targets<'a> {
    Fixed(&'a NeighborTargets),
    Ooc(OocConfig),
}

/// Partitions `0..n` into fitting and validation rows.
fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n - n_val < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "validation", &[]));
    let mut val = order[..n_val].to_vec();
    let mut fit = order[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

/// Minibatches of a shuffled order; a lone trailing row joins the previous batch.
pub fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 && end - start >= 1 && order.len() > 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Evaluation-mode training objective averaged over every row of `data`.
pub fn evaluate_objective(model: &Model, data: &Dataset, targets: &NeighborTargets, seed: u64) -> Result<f64> {
    let cfg = model.config();
    let (d, k) = (data.dim(), cfg.k);
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut unused = rng::stream(seed, "objective-dropout", &[]);
    for chunk in rows.chunks(256) {
        let mut x = Vec::with_capacity(chunk.len() * d);
        let mut memory = Vec::new();
        let mut labels = Vec::with_capacity(chunk.len() * k);
        let mut vectors = Vec::with_capacity(chunk.len() * k * d);
        for &i in chunk {
            x.extend_from_slice(data.row(i));
            labels.extend_from_slice(targets.labels_of(i));
            vectors.extend_from_slice(targets.vectors_of(i));
            if cfg.kind.is_memnet() {
                let mut r = rng::stream(seed, "objective-memory", &[i as u64]);
                let idx = sample_memory(data.len(), cfg.memory_size, Some(i), &mut r)?;
                gather_rows(data, &idx, &mut memory);
            }
        }
        let gt: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let mut g = Graph::new(model.store());
        let fwd = model.forward(
            &mut g,
            BatchInput {
                x: &x,
                memory: cfg.kind.is_memnet().then_some(memory.as_slice()),
                teacher: Some(&labels),
            },
            Mode::Eval,
            &mut unused,
        )?;
        let loss = model.loss(
            &mut g,
            &fwd,
            BatchTargets {
                labels: &labels,
                vectors: &vectors,
                ground_truth: &gt,
            },
        )?;
        total += g.value(loss).item().expect("scalar loss") * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains on precomputed targets aligned with the rows of `data`.
/// `data` is in normalized feature space, `norm` maps raw inputs into it.
pub fn train(
    data: &Dataset,
    norm: &NormStats,
    targets: &NeighborTargets,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if targets.len() != data.len() || targets.dim() != data.dim() {
        return Err(Error::Validation(format!(
            "targets cover {} samples of width {}, dataset has {} of width {}",
            targets.len(),
            targets.dim(),
            data.len(),
            data.dim()
        )));
    }
    if targets.k() != cfg.k {
        return Err(Error::Validation(format!(
            "targets hold K = {} neighbors, configuration asks for K = {}",
            targets.k(),
            cfg.k
        )));
    }
    run(data, norm, Targets::Fixed(targets), cfg)
}

/// Trains with out-of-core targets refreshed for every sample each epoch.
pub fn train_ooc(data: &Dataset, norm: &NormStats, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    run(data, norm, Targets::Ooc(cfg.ooc()), cfg)
}

struct BatchBuf {
    x: Vec<f64>,
    memory: Vec<f64>,
    labels: Vec<usize>,
    vectors: Vec<f64>,
    gt: Vec<usize>,
}

fn run(data: &Dataset, norm: &NormStats, targets: Targets<'_>, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(data.dim(), data.classes());
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.store(), cfg.adam);
    let mut report = TrainReport::default();

    let (fit_rows, val_rows) = if cfg.patience > 0 {
        validation_split(data.len(), cfg.validation_fraction, cfg.seed)
    } else {
        ((0..data.len()).collect(), Vec::new())
    };
    let fit = data.subset(&fit_rows);
    let val = data.subset(&val_rows);
    if model_cfg.kind.is_memnet() && model_cfg.memory_size >= fit.len() {
        return Err(Error::InsufficientCandidates {
            required: model_cfg.memory_size + 1,
            available: fit.len(),
        });
    }
    let fixed = match &targets {
        Targets::Fixed(t) => Some(t.subset(&fit_rows)),
        Targets::Ooc(_) => None,
    };

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_store = model.store().clone();
    let mut stale = 0;
    let (d, k) = (data.dim(), cfg.k);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let refreshed;
        let epoch_targets = match (&targets, &fixed) {
            (_, Some(t)) => t,
            (Targets::Ooc(ooc), None) => {
                refreshed = ooc_targets_for_rows(data, k, ooc, epoch as u64, &fit_rows)?;
                &refreshed
            }
            (Targets::Fixed(_), None) => unreachable!("fixed targets are subset up front"),
        };
        report.target_seconds += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, batch) in minibatches(&order, cfg.batch_size).into_iter().enumerate() {
            let mut buf = BatchBuf {
                x: Vec::with_capacity(batch.len() * d),
                memory: Vec::new(),
                labels: Vec::with_capacity(batch.len() * k),
                vectors: Vec::with_capacity(batch.len() * k * d),
                gt: Vec::with_capacity(batch.len()),
            };
            for &i in batch {
                buf.x.extend_from_slice(fit.row(i));
                buf.labels.extend_from_slice(epoch_targets.labels_of(i));
                buf.vectors.extend_from_slice(epoch_targets.vectors_of(i));
                buf.gt.push(fit.label(i));
                if model_cfg.kind.is_memnet() {
                    let mut r = rng::stream(cfg.seed, "memory", &[epoch as u64, i as u64]);
                    let idx = sample_memory(fit.len(), model_cfg.memory_size, Some(i), &mut r)?;
                    gather_rows(&fit, &idx, &mut buf.memory);
                }
            }
            let mut drop_rng = rng::stream(cfg.seed, "dropout", &[epoch as u64, bi as u64]);
            let (grads, updates, loss) = {
                let mut g = Graph::new(model.store());
                let fwd = model.forward(
                    &mut g,
                    BatchInput {
                        x: &buf.x,
                        memory: model_cfg.kind.is_memnet().then_some(buf.memory.as_slice()),
                        teacher: Some(&buf.labels),
                    },
                    Mode::Train,
                    &mut drop_rng,
                )?;
                let loss = model.loss(
                    &mut g,
                    &fwd,
                    BatchTargets {
                        labels: &buf.labels,
                        vectors: &buf.vectors,
                        ground_truth: &buf.gt,
                    },
                )?;
                let value = g.value(loss).item().expect("scalar loss");
                let grads = g.backward(loss)?.into_params();
                (grads, g.into_running_stat_updates(), value)
            };
            if !loss.is_finite() {
                return Err(Error::Validation(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            for u in &updates {
                u.apply(store);
            }
            adam.step(store)?;
        }
        let epoch_loss = loss_sum / fit.len() as f64;
        report.epoch_losses.push(epoch_loss);
        let objective = evaluate_objective(&model, &fit, epoch_targets, cfg.seed)?;
        report.epoch_objective.push(objective);
        log::info!("epoch {} loss {:.6} objective {:.6}", epoch + 1, epoch_loss, objective);

        if val.is_empty() {
            report.best_epoch = epoch + 1;
            best_store = model.store().clone();
        } else {
            let pred = Predictor::new(&model, &fit, cfg.seed).predict_labels(&val)?;
            let f1 = macro_f1(&pred, val.labels(), val.classes())?;
            report.validation_f1.push(f1);
            log::info!("epoch {} validation macro F1 {:.4}", epoch + 1, f1);
            if f1 > best_f1 {
                best_f1 = f1;
                best_store = model.store().clone();
                report.best_epoch = epoch + 1;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        report.train_seconds += t1.elapsed().as_secs_f64();
        if cfg.patience > 0 && stale >= cfg.patience {
            log::info!("stopping after epoch {}: no validation gain in {} epochs", epoch + 1, stale);
            break;
        }
    }
    model.store_mut().load_values_from(&best_store)?;
    let ckpt = Checkpoint::from_model(&model, data.label_map().clone(), norm.clone());
    Ok((ckpt, report))
}
