//! Neighbor-sequence models: encoder-decoder (V2LS, V2VS, V2VSLS) and
//! memory-network (MNkNN, MNkNN_VEC) variants behind one [`Model`] type.

pub mod memnet;
pub mod seq2seq;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Mode, ParamStore, Tensor, Var, KL_EPS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    V2ls,
    V2vs,
    V2vsls,
    Mnknn,
    MnknnVec,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::V2ls,
        ModelKind::V2vs,
        ModelKind::V2vsls,
        ModelKind::Mnknn,
        ModelKind::MnknnVec,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::V2ls => "v2ls",
            ModelKind::V2vs => "v2vs",
            ModelKind::V2vsls => "v2vsls",
            ModelKind::Mnknn => "mnknn",
            ModelKind::MnknnVec => "mnknn_vec",
        }
    }

    /// Whether the model emits per-step label distributions.
    pub fn has_labels(self) -> bool {
        self != ModelKind::V2vs
    }

    /// Whether the model emits out-of-sample feature vectors.
    pub fn has_vectors(self) -> bool {
        matches!(self, ModelKind::V2vs | ModelKind::V2vsls | ModelKind::MnknnVec)
    }

    pub fn is_memnet(self) -> bool {
        matches!(self, ModelKind::Mnknn | ModelKind::MnknnVec)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.tag() == norm)
            .ok_or_else(|| Error::ModelKind(s.to_string(), "v2ls, v2vs, v2vsls, mnknn, mnknn-vec"))
    }
}

/// Decoder input between steps for label-emitting encoder-decoder models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    /// Previous predicted distribution.
    #[default]
    Predicted,
    /// One-hot previous target label.
    TeacherForced,
}

impl FromStr for FeedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "predicted" => Ok(FeedMode::Predicted),
            "teacher_forced" => Ok(FeedMode::TeacherForced),
            _ => Err(Error::Usage(format!(
                "unknown feed mode {s}; expected predicted or teacher-forced"
            ))),
        }
    }
}

/// Architecture and loss hyperparameters shared by every model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Feature dimension.
    pub d: usize,
    pub classes: usize,
    /// Neighbor count: decoder steps or memory hops.
    pub k: usize,
    pub hidden: usize,
    pub memory_size: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub batch_norm: bool,
    pub feed_mode: FeedMode,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, d: usize, classes: usize) -> Self {
        ModelConfig {
            kind,
            d,
            classes,
            k: 5,
            hidden: 128,
            memory_size: 64,
            embed_dim: 64,
            tau: 0.85,
            alpha: 9.5,
            lambda: 0.12,
            dropout: 0.2,
            batch_norm: true,
            feed_mode: FeedMode::Predicted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.d == 0 {
            return bad("feature dimension must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.memory_size == 0 {
            return bad("hidden size, embedding size and memory size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) {
            return bad(format!(
                "alpha and lambda must be nonnegative, got {} and {}",
                self.alpha, self.lambda
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Graph nodes produced by one forward pass over a minibatch.
#[derive(Clone, Debug, Default)]
pub struct Forward {
    /// Per-step label distributions `[b, C]`, K entries (empty for V2VS).
    pub steps: Vec<Var>,
    /// Mean of `steps`.
    pub mean: Option<Var>,
    /// Per-step predicted vectors `[b, d]` (empty without a vector head).
    pub vectors: Vec<Var>,
    /// Per-hop attention `[b, n]` (memory networks only).
    pub attention: Vec<Var>,
}

/// Minibatch inputs in normalized feature space.
#[derive(Clone, Copy, Debug)]
pub struct BatchInput<'a> {
    /// `b×d` row-major queries.
    pub x: &'a [f64],
    /// `b×n×d` memory slots, required by memory networks.
    pub memory: Option<&'a [f64]>,
    /// `b×K` target labels, used for teacher-forced feeding.
    pub teacher: Option<&'a [usize]>,
}

/// Minibatch supervision.
#[derive(Clone, Copy, Debug)]
pub struct BatchTargets<'a> {
    /// `b×K` neighbor labels.
    pub labels: &'a [usize],
    /// `b×K×d` neighbor vectors.
    pub vectors: &'a [f64],
    /// `b` ground-truth labels.
    pub ground_truth: &'a [usize],
}

/// Model outputs for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// Mean label distribution (empty for V2VS).
    pub mean: Vec<f64>,
    /// Per-step label distributions.
    pub steps: Vec<Vec<f64>>,
    /// Per-step out-of-sample vectors.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Parts {
    Seq(seq2seq::Seq2SeqParams),
    Mem(memnet::MemNetParams),
}

/// A configured model and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    parts: Parts,
}

impl Model {
    /// Freshly initialized model; weights come from the `(seed, "init")` stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init", &[]);
        let parts = if config.kind.is_memnet() {
            Parts::Mem(memnet::MemNetParams::register(&mut store, &config, &mut r)?)
        } else {
            Parts::Seq(seq2seq::Seq2SeqParams::register(&mut store, &config, &mut r)?)
        };
        Ok(Model {
            config,
            store,
            parts,
        })
    }

    /// Model with parameter values taken from `values`, matched by name.
    pub fn with_values(config: ModelConfig, values: &ParamStore) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.store.load_values_from(values)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn seq2seq_params(&self) -> Option<&seq2seq::Seq2SeqParams> {
        match &self.parts {
            Parts::Seq(p) => Some(p),
            Parts::Mem(_) => None,
        }
    }

    pub fn memnet_params(&self) -> Option<&memnet::MemNetParams> {
        match &self.parts {
            Parts::Mem(p) => Some(p),
            Parts::Seq(_) => None,
        }
    }

    /// Records a forward pass. `g` may borrow any store with this model's layout.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        input: BatchInput<'_>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if input.x.is_empty() || input.x.len() % cfg.d != 0 {
            return Err(Error::dim("model input", &[cfg.d], &[input.x.len()]));
        }
        let b = input.x.len() / cfg.d;
        let x = g.constant(Tensor::new(vec![b, cfg.d], input.x.to_vec())?);
        match &self.parts {
            Parts::Seq(p) => seq2seq::forward(g, p, cfg, x, input.teacher, mode, rng),
            Parts::Mem(p) => {
                let memory = input.memory.ok_or_else(|| {
                    Error::Validation("memory network forward needs a memory batch".into())
                })?;
                let n = cfg.memory_size;
                if memory.len() != b * n * cfg.d {
                    return Err(Error::dim("memory", &[b, n, cfg.d], &[memory.len()]));
                }
                let mem = g.constant(Tensor::new(vec![b * n, cfg.d], memory.to_vec())?);
                memnet::forward(g, p, cfg, x, mem, mode, rng)
            }
        }
    }

    /// Minibatch-mean training objective for this model kind.
    pub fn loss(&self, g: &mut Graph<'_>, fwd: &Forward, targets: BatchTargets<'_>) -> Result<Var> {
        let cfg = &self.config;
        let per_row = match cfg.kind {
            ModelKind::V2ls | ModelKind::Mnknn => label_loss(g, fwd, targets, cfg)?,
            ModelKind::V2vs => vector_loss(g, fwd, targets, cfg)?,
            ModelKind::V2vsls | ModelKind::MnknnVec => {
                let l1 = label_loss(g, fwd, targets, cfg)?;
                let l2 = vector_loss(g, fwd, targets, cfg)?;
                let l2 = g.scale(l2, cfg.lambda);
                g.add(l1, l2)?
            }
        };
        Ok(g.mean(per_row))
    }

    /// Evaluation-mode predictions for a batch of normalized queries.
    pub fn predict_batch(&self, x: &[f64], memory: Option<&[f64]>) -> Result<Vec<PredictionBundle>> {
        let mut g = Graph::new(&self.store);
        let mut unused = rng::stream(0, "eval-dropout", &[]);
        let fwd = self.forward(
            &mut g,
            BatchInput {
                x,
                memory,
                teacher: None,
            },
            Mode::Eval,
            &mut unused,
        )?;
        let b = x.len() / self.config.d;
        let rows = |v: Var, g: &Graph<'_>, r: usize| g.value(v).row(r).to_vec();
        Ok((0..b)
            .map(|r| PredictionBundle {
                mean: fwd.mean.map(|m| rows(m, &g, r)).unwrap_or_default(),
                steps: fwd.steps.iter().map(|s| rows(*s, &g, r)).collect(),
                vectors: fwd.vectors.iter().map(|v| rows(*v, &g, r)).collect(),
            })
            .collect())
    }
}

/// `[b, C]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean of per-step distributions.
pub(crate) fn mean_of(g: &mut Graph<'_>, steps: &[Var]) -> Result<Var> {
    let mut acc = steps[0];
    for s in &steps[1..] {
        acc = g.add(acc, *s)?;
    }
    Ok(g.scale(acc, 1.0 / steps.len() as f64))
}

/// Per-row `(1/K)·Σ_t KL(onehot(Y^T_t) ‖ Y^P_t) + α·KL(onehot(Y^GT) ‖ Y^P)`.
pub fn label_loss(
    g: &mut Graph<'_>,
    fwd: &Forward,
    targets: BatchTargets<'_>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mean = fwd
        .mean
        .ok_or_else(|| Error::Validation(format!("{} has no label outputs", cfg.kind)))?;
    let k = fwd.steps.len();
    let b = targets.ground_truth.len();
    if targets.labels.len() != b * k {
        return Err(Error::dim("label targets", &[b, k], &[targets.labels.len()]));
    }
    let mut total: Option<Var> = None;
    for (t, step) in fwd.steps.iter().enumerate() {
        let col: Vec<usize> = (0..b).map(|r| targets.labels[r * k + t]).collect();
        let target = g.constant(one_hot(&col, cfg.classes)?);
        let kl = g.kl_divergence(target, *step, KL_EPS)?;
        total = Some(match total {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    let neighbor = g.scale(total.expect("K ≥ 1"), 1.0 / k as f64);
    let gt = g.constant(one_hot(targets.ground_truth, cfg.classes)?);
    let gt_kl = g.kl_divergence(gt, mean, KL_EPS)?;
    let gt_term = g.scale(gt_kl, cfg.alpha);
    g.add(neighbor, gt_term)
}

/// Per-row `Σ_t ‖X^P_t − X^T_t‖²`.
pub fn vector_loss(
    g: &mut Graph<'_>,
    fwd: &Forward,
    targets: BatchTargets<'_>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if fwd.vectors.is_empty() {
        return Err(Error::Validation(format!("{} has no vector outputs", cfg.kind)));
    }
    let k = fwd.vectors.len();
    let d = cfg.d;
    let b = targets.vectors.len() / (k * d).max(1);
    if targets.vectors.len() != b * k * d {
        return Err(Error::dim("vector targets", &[b, k, d], &[targets.vectors.len()]));
    }
    let mut total: Option<Var> = None;
    for (t, pred) in fwd.vectors.iter().enumerate() {
        let mut col = Vec::with_capacity(b * d);
        for r in 0..b {
            let base = (r * k + t) * d;
            col.extend_from_slice(&targets.vectors[base..base + d]);
        }
        let target = g.constant(Tensor::new(vec![b, d], col)?);
        let sq = g.squared_l2(*pred, target)?;
        total = Some(match total {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    Ok(total.expect("K ≥ 1"))
}
