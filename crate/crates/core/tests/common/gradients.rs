//! Finite-difference cases for every differentiable operation and both
//! model families.

use knnseq::diff::{
    lstm_cell_step, register_batch_norm, Graph, Linear, LstmParams, Mode, ParamStore, Tensor, Var, KL_EPS,
};
use knnseq::models::{seq2seq, BatchInput, BatchTargets, FeedMode, Model, ModelConfig, ModelKind};
use knnseq::{rng, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{max_rel_error, uniform, Build};

pub const TOL: f64 = 1e-4;
pub const TOL_BATCH_NORM: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Case {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn case(name: &str, tolerance: f64, store: &ParamStore, inputs: &[Tensor], build: &Build<'_>) -> Case {
    Case {
        name: name.to_string(),
        error: max_rel_error(store, inputs, build),
        tolerance,
    }
}

fn op(name: &str, shapes: &[&[usize]], build: &Build<'_>) -> Case {
    let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| uniform(s, 100 + i as u64)).collect();
    case(name, TOL, &ParamStore::new(), &inputs, build)
}

fn positive_distribution(g: &mut Graph<'_>, z: Var) -> Result<Var> {
    g.softmax_with_temperature(z, 1.0)
}

pub fn operation_cases() -> Vec<Case> {
    let mut out = vec![
        op("matmul", &[&[3, 4], &[4, 2]], &|g, v| g.matmul(v[0], v[1])),
        op("affine", &[&[3, 4], &[4, 2], &[2]], &|g, v| g.affine(v[0], v[1], v[2])),
        op("add_row", &[&[3, 4], &[4]], &|g, v| g.add_row(v[0], v[1])),
        op("add", &[&[2, 3], &[2, 3]], &|g, v| g.add(v[0], v[1])),
        op("mul", &[&[2, 3], &[2, 3]], &|g, v| g.mul(v[0], v[1])),
        op("scale", &[&[2, 3]], &|g, v| Ok(g.scale(v[0], -1.7))),
        op("relu", &[&[3, 5]], &|g, v| Ok(g.relu(v[0]))),
        op("tanh", &[&[3, 5]], &|g, v| Ok(g.tanh(v[0]))),
        op("sigmoid", &[&[3, 5]], &|g, v| Ok(g.sigmoid(v[0]))),
        op("softmax tau=0.85", &[&[3, 4]], &|g, v| g.softmax_with_temperature(v[0], 0.85)),
        op("softmax tau=1", &[&[3, 4]], &|g, v| g.softmax_with_temperature(v[0], 1.0)),
        op("kl_divergence", &[&[3, 4], &[3, 4]], &|g, v| {
            let t = positive_distribution(g, v[0])?;
            let p = g.softmax_with_temperature(v[1], 0.85)?;
            g.kl_divergence(t, p, KL_EPS)
        }),
        op("squared_l2", &[&[3, 4], &[3, 4]], &|g, v| g.squared_l2(v[0], v[1])),
        op("concat", &[&[2, 3], &[2, 2]], &|g, v| g.concat(&[v[0], v[1], v[0]])),
        op("slice_cols", &[&[3, 6]], &|g, v| g.slice_cols(v[0], 2, 3)),
        op("reshape", &[&[2, 6]], &|g, v| g.reshape(v[0], &[3, 4])),
        op("sum", &[&[2, 3]], &|g, v| {
            let s = g.tanh(v[0]);
            Ok(g.sum(s))
        }),
        op("mean", &[&[2, 3]], &|g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.mean(s))
        }),
        op("row_dot", &[&[2, 3, 4], &[2, 4]], &|g, v| g.row_dot(v[0], v[1])),
        op("row_weighted_sum", &[&[2, 3], &[2, 3, 4]], &|g, v| g.row_weighted_sum(v[0], v[1])),
        op("dropout", &[&[4, 5]], &|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            g.dropout(v[0], 0.3, Mode::Train, &mut r)
        }),
    ];

    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let lin = Linear::register(&mut store, "lin", 4, 3, &mut r).unwrap();
    out.push(case("linear", TOL, &store, &[uniform(&[3, 4], 5)], &|g, v| lin.forward(g, v[0])));

    let mut store = ParamStore::new();
    let lstm = LstmParams::register(&mut store, "cell", 3, 4, &mut r).unwrap();
    let lstm_inputs = [uniform(&[2, 3], 6), uniform(&[2, 4], 7), uniform(&[2, 4], 8)];
    out.push(case("lstm_cell_step", TOL, &store, &lstm_inputs, &|g, v| {
        let (h, c) = lstm_cell_step(g, &lstm, v[0], v[1], v[2])?;
        g.concat(&[h, c])
    }));

    let head = Linear::register(&mut store, "head", 4, 3, &mut r).unwrap();
    let composite = [uniform(&[2, 3], 9), uniform(&[2, 4], 10), uniform(&[2, 4], 11), uniform(&[2, 3], 12)];
    out.push(case("lstm -> affine -> softmax -> kl", TOL, &store, &composite, &|g, v| {
        let (h, _) = lstm_cell_step(g, &lstm, v[0], v[1], v[2])?;
        let (h2, _) = lstm_cell_step(g, &lstm, v[0], h, v[2])?;
        let z = head.forward(g, h2)?;
        let p = g.softmax_with_temperature(z, 0.85)?;
        let t = positive_distribution(g, v[3])?;
        g.kl_divergence(t, p, KL_EPS)
    }));

    out.push(case("seq2seq encode -> head", TOL, &store, &[uniform(&[2, 3], 13)], &|g, v| {
        let (h, _) = seq2seq::encode(g, &lstm, v[0])?;
        head.forward(g, h)
    }));

    let mut store = ParamStore::new();
    let bn = register_batch_norm(&mut store, "bn", 3).unwrap();
    {
        let s = store.get_mut(bn.gamma);
        s.value = uniform(&[3], 14);
        let s = store.get_mut(bn.beta);
        s.value = uniform(&[3], 15);
    }
    out.push(case("batch_norm train", TOL_BATCH_NORM, &store, &[uniform(&[4, 3], 16)], &|g, v| {
        let y = g.batch_norm(v[0], bn, Mode::Train)?;
        Ok(g.tanh(y))
    }));
    store.get_mut(bn.running_mean).value = uniform(&[3], 17);
    store.get_mut(bn.running_var).value = Tensor::vector(vec![0.5, 1.5, 2.0]);
    out.push(case("batch_norm eval", TOL_BATCH_NORM, &store, &[uniform(&[4, 3], 18)], &|g, v| {
        g.batch_norm(v[0], bn, Mode::Eval)
    }));
    out
}

/// Full training loss of a micro model. Memory networks draw `n` memory
/// rows per query from fixed random values.
pub fn model_case(name: &str, cfg: ModelConfig, batch: usize, tolerance: f64) -> Case {
    let (d, k) = (cfg.d, cfg.k);
    let model = Model::new(cfg.clone(), 3).unwrap();
    let x = uniform(&[batch, d], 20).into_data();
    let memory = uniform(&[batch * cfg.memory_size, d], 21).into_data();
    let labels: Vec<usize> = (0..batch * k).map(|i| (i * 7 + 1) % cfg.classes).collect();
    let vectors = uniform(&[batch * k, d], 22).into_data();
    let truth: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();
    let build = |g: &mut Graph<'_>, _: &[Var]| -> Result<Var> {
        let mut r = rng::stream(5, "gradient-check", &[]);
        let fwd = model.forward(
            g,
            BatchInput {
                x: &x,
                memory: cfg.kind.is_memnet().then_some(&memory[..]),
                teacher: Some(&labels),
            },
            Mode::Train,
            &mut r,
        )?;
        model.loss(
            g,
            &fwd,
            BatchTargets {
                labels: &labels,
                vectors: &vectors,
                ground_truth: &truth,
            },
        )
    };
    case(name, tolerance, model.store(), &[], &build)
}

pub fn v2vsls_fixture(batch_norm: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(ModelKind::V2vsls, 4, 3);
    cfg.k = 2;
    cfg.hidden = 5;
    cfg.batch_norm = batch_norm;
    cfg
}

pub fn mnknn_vec_fixture(batch_norm: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(ModelKind::MnknnVec, 3, 3);
    cfg.k = 2;
    cfg.memory_size = 4;
    cfg.embed_dim = 6;
    cfg.batch_norm = batch_norm;
    cfg
}

pub fn model_cases() -> Vec<Case> {
    let mut out = vec![
        model_case("v2vsls loss", v2vsls_fixture(false), 3, TOL),
        model_case("v2vsls loss with batch norm", v2vsls_fixture(true), 3, TOL_BATCH_NORM),
        model_case("mnknn_vec loss", mnknn_vec_fixture(false), 3, TOL),
        model_case("mnknn_vec loss with batch norm", mnknn_vec_fixture(true), 3, TOL_BATCH_NORM),
    ];
    for kind in [ModelKind::V2ls, ModelKind::V2vs, ModelKind::Mnknn] {
        let mut cfg = if kind.is_memnet() { mnknn_vec_fixture(false) } else { v2vsls_fixture(false) };
        cfg.kind = kind;
        out.push(model_case(&format!("{kind} loss"), cfg, 3, TOL));
    }
    let mut tf = v2vsls_fixture(false);
    tf.feed_mode = FeedMode::TeacherForced;
    out.push(model_case("v2vsls teacher-forced loss", tf, 3, TOL));
    out
}
