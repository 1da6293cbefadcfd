//! Encoder-decoder over a length-1 input sequence with K decoding steps.

use rand::Rng;

use super::{mean_of, one_hot, FeedMode, Forward, ModelConfig, ModelKind};
use crate::diff::{
    lstm_cell_step, register_batch_norm, BatchNormIds, Graph, Linear, LstmParams, Mode, ParamId,
    ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Seq2SeqParams {
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    /// Learned decoder input for the first step, initialized uniform.
    pub start: ParamId,
    pub label_head: Option<Linear>,
    pub vector_hidden: Option<Linear>,
    pub vector_out: Option<Linear>,
    /// V2VS only: maps the previous predicted vector to the decoder feed.
    pub feed_projection: Option<Linear>,
    pub context_norm: Option<BatchNormIds>,
}

impl Seq2SeqParams {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, c, h) = (cfg.d, cfg.classes, cfg.hidden);
        let encoder = LstmParams::register(store, "encoder", d, h, rng)?;
        let decoder = LstmParams::register(store, "decoder", c + h, h, rng)?;
        let start = store.add("start", Tensor::filled(&[c], 1.0 / c as f64))?;
        let label_head = if cfg.kind.has_labels() {
            Some(Linear::register(store, "label_head", h, c, rng)?)
        } else {
            None
        };
        let (vector_hidden, vector_out) = if cfg.kind.has_vectors() {
            (
                Some(Linear::register(store, "vector_hidden", h, h, rng)?),
                Some(Linear::register(store, "vector_out", h, d, rng)?),
            )
        } else {
            (None, None)
        };
        let feed_projection = if cfg.kind == ModelKind::V2vs {
            Some(Linear::register(store, "feed_projection", d, c, rng)?)
        } else {
            None
        };
        let context_norm = if cfg.batch_norm {
            Some(register_batch_norm(store, "context_norm", h)?)
        } else {
            None
        };
        Ok(Seq2SeqParams {
            encoder,
            decoder,
            start,
            label_head,
            vector_hidden,
            vector_out,
            feed_projection,
            context_norm,
        })
    }
}

/// One encoder LSTM step from the zero state. Returns `(h^e, c^e)`.
pub fn encode(g: &mut Graph<'_>, params: &LstmParams, x: Var) -> Result<(Var, Var)> {
    let b = g.value(x).rows();
    let h0 = g.constant(Tensor::zeros(&[b, params.hidden]));
    let c0 = g.constant(Tensor::zeros(&[b, params.hidden]));
    lstm_cell_step(g, params, x, h0, c0)
}

/// Decoder that starts from the encoder state and reads `[feed ; context]`
/// at every step. Refuses to run more than `k` steps.
pub struct Decoder {
    params: LstmParams,
    context: Var,
    h: Var,
    c: Var,
    taken: usize,
    k: usize,
}

impl Decoder {
    pub fn new(params: LstmParams, context: Var, cell: Var, k: usize) -> Self {
        Decoder {
            params,
            context,
            h: context,
            c: cell,
            taken: 0,
            k,
        }
    }

    /// Advances one step and returns `y_t = h^d_t`.
    pub fn step(&mut self, g: &mut Graph<'_>, feed: Var) -> Result<Var> {
        if self.taken == self.k {
            return Err(Error::DecoderExhausted(self.k));
        }
        let input = g.concat(&[feed, self.context])?;
        let (h, c) = lstm_cell_step(g, &self.params, input, self.h, self.c)?;
        self.h = h;
        self.c = c;
        self.taken += 1;
        Ok(h)
    }

    pub fn steps_taken(&self) -> usize {
        self.taken
    }
}

/// `softmax((y·W_y + b_y) / τ)`.
pub fn label_head(g: &mut Graph<'_>, head: &Linear, y: Var, tau: f64) -> Result<Var> {
    let z = head.forward(g, y)?;
    g.softmax_with_temperature(z, tau)
}

/// `W_x2·max(W_x1·y + b_x1, 0) + b_x2`.
pub fn vector_head(g: &mut Graph<'_>, hidden: &Linear, out: &Linear, y: Var) -> Result<Var> {
    let a = hidden.forward(g, y)?;
    let r = g.relu(a);
    out.forward(g, r)
}

pub(crate) fn forward<R: Rng>(
    g: &mut Graph<'_>,
    p: &Seq2SeqParams,
    cfg: &ModelConfig,
    x: Var,
    teacher: Option<&[usize]>,
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    let b = g.value(x).rows();
    let k = cfg.k;
    let teacher = match (cfg.feed_mode, teacher) {
        (FeedMode::TeacherForced, Some(t)) if cfg.kind.has_labels() => {
            if t.len() != b * k {
                return Err(Error::dim("teacher labels", &[b, k], &[t.len()]));
            }
            Some(t)
        }
        _ => None,
    };
    let (he, ce) = encode(g, &p.encoder, x)?;
    let context = match p.context_norm {
        Some(ids) => g.batch_norm(he, ids, mode)?,
        None => he,
    };
    let zeros = g.constant(Tensor::zeros(&[b, cfg.classes]));
    let start = g.param(p.start);
    let mut feed = g.add_row(zeros, start)?;
    let mut decoder = Decoder::new(p.decoder, context, ce, k);
    let mut out = Forward::default();
    for t in 0..k {
        let y = decoder.step(g, feed)?;
        let y = g.dropout(y, cfg.dropout, mode, rng)?;
        let label = match &p.label_head {
            Some(head) => {
                let yp = label_head(g, head, y, cfg.tau)?;
                out.steps.push(yp);
                Some(yp)
            }
            None => None,
        };
        let vector = match (&p.vector_hidden, &p.vector_out) {
            (Some(h), Some(o)) => {
                let xp = vector_head(g, h, o, y)?;
                out.vectors.push(xp);
                Some(xp)
            }
            _ => None,
        };
        if t + 1 == k {
            break;
        }
        feed = match (&p.feed_projection, teacher, label, vector) {
            (Some(proj), _, _, Some(xp)) => proj.forward(g, xp)?,
            (None, Some(tl), _, _) => {
                let prev: Vec<usize> = (0..b).map(|r| tl[r * k + t]).collect();
                g.constant(one_hot(&prev, cfg.classes)?)
            }
            (None, None, Some(yp), _) => yp,
            _ => unreachable!("every encoder-decoder kind has a feed source"),
        };
    }
    if !out.steps.is_empty() {
        out.mean = Some(mean_of(g, &out.steps)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BatchInput, BatchTargets, Model};
    use crate::rng;

    fn zero_model(kind: ModelKind, d: usize, c: usize, k: usize) -> Model {
        let mut cfg = ModelConfig::new(kind, d, c);
        cfg.k = k;
        cfg.hidden = 4;
        cfg.batch_norm = false;
        let mut m = Model::new(cfg, 1).unwrap();
        let ids: Vec<_> = m.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = m.store().value(id).shape().to_vec();
            m.store_mut().set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        m
    }

    #[test]
    fn zero_weights_give_zero_state_and_uniform_outputs() {
        let m = zero_model(ModelKind::V2vsls, 3, 4, 3);
        let store = m.store().clone();
        let mut g = Graph::new(&store);
        let p = m.seq2seq_params().unwrap();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let (h, c) = encode(&mut g, &p.encoder, x).unwrap();
        assert!(g.value(h).data().iter().chain(g.value(c).data()).all(|v| *v == 0.0));

        let out = m.predict_batch(&[0.5, -1.0, 2.0], None).unwrap();
        for s in &out[0].steps {
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        assert!(out[0].vectors.iter().flatten().all(|v| *v == 0.0));
        assert!(out[0].mean.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn decoder_refuses_extra_steps() {
        let m = Model::new(ModelConfig::new(ModelKind::V2ls, 2, 2), 0).unwrap();
        let store = m.store().clone();
        let mut g = Graph::new(&store);
        let p = m.seq2seq_params().unwrap();
        let h = g.constant(Tensor::zeros(&[1, 128]));
        let feed = g.constant(Tensor::zeros(&[1, 2]));
        let mut dec = Decoder::new(p.decoder, h, h, 2);
        dec.step(&mut g, feed).unwrap();
        dec.step(&mut g, feed).unwrap();
        assert!(matches!(dec.step(&mut g, feed), Err(Error::DecoderExhausted(2))));
        assert_eq!(dec.steps_taken(), 2);
    }

    #[test]
    fn label_head_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 3])).unwrap();
        let b = store.add("b", Tensor::vector(vec![50.0, 0.0, 0.0])).unwrap();
        let head = Linear { weight: w, bias: b };
        let mut g = Graph::new(&store);
        let y = g.constant(Tensor::vector(vec![0.3, -0.2]));
        let p = label_head(&mut g, &head, y, 1.0).unwrap();
        assert!(g.value(p).data()[0] > 1.0 - 1e-12);

        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 3, vec![1.0, 0.5, -0.5]).unwrap()).unwrap();
        let b = store.add("b", Tensor::zeros(&[3])).unwrap();
        let head = Linear { weight: w, bias: b };
        let mut g = Graph::new(&store);
        let y = g.constant(Tensor::vector(vec![1.0]));
        let sharp = label_head(&mut g, &head, y, 0.85).unwrap();
        let plain = label_head(&mut g, &head, y, 1.0).unwrap();
        assert!(g.value(sharp).data()[0] > g.value(plain).data()[0]);
    }

    #[test]
    fn vector_head_identity_and_clamp() {
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::identity(3)).unwrap();
        let b1 = store.add("b1", Tensor::zeros(&[3])).unwrap();
        let w2 = store.add("w2", Tensor::identity(3)).unwrap();
        let b2 = store.add("b2", Tensor::zeros(&[3])).unwrap();
        let (h, o) = (Linear { weight: w1, bias: b1 }, Linear { weight: w2, bias: b2 });
        let mut g = Graph::new(&store);
        let y = g.constant(Tensor::vector(vec![0.5, 0.0, 2.0]));
        let x = vector_head(&mut g, &h, &o, y).unwrap();
        assert_eq!(g.value(x).data(), &[0.5, 0.0, 2.0]);
        let y = g.constant(Tensor::vector(vec![-0.5, 1.0, -2.0]));
        let x = vector_head(&mut g, &h, &o, y).unwrap();
        assert_eq!(g.value(x).data(), &[0.0, 1.0, 0.0]);
    }

    fn step_inputs(kind: ModelKind, feed_mode: FeedMode) -> (Model, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut cfg = ModelConfig::new(kind, 3, 3);
        cfg.k = 3;
        cfg.hidden = 5;
        cfg.feed_mode = feed_mode;
        let m = Model::new(cfg, 7).unwrap();
        let store = m.store().clone();
        let mut g = Graph::new(&store);
        let teacher = [2usize, 0, 1];
        let x = [0.1, -0.4, 0.9];
        let fwd = m
            .forward(
                &mut g,
                BatchInput {
                    x: &x,
                    memory: None,
                    teacher: Some(&teacher),
                },
                Mode::Eval,
                &mut rng::stream(0, "t", &[]),
            )
            .unwrap();
        let steps = fwd.steps.iter().map(|v| g.value(*v).data().to_vec()).collect();
        let vectors = fwd.vectors.iter().map(|v| g.value(*v).data().to_vec()).collect();
        (m, steps, vectors)
    }

    #[test]
    fn feed_modes_use_the_documented_inputs() {
        let (m, steps, _) = step_inputs(ModelKind::V2ls, FeedMode::Predicted);
        let p = m.seq2seq_params().unwrap().clone();
        let store = m.store().clone();
        // Replays the decoder by hand with the previous prediction as feed.
        let replay = |feeds: &[Vec<f64>]| {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::matrix(1, 3, vec![0.1, -0.4, 0.9]).unwrap());
            let (he, ce) = encode(&mut g, &p.encoder, x).unwrap();
            let ctx = g.batch_norm(he, p.context_norm.unwrap(), Mode::Eval).unwrap();
            let mut dec = Decoder::new(p.decoder, ctx, ce, 3);
            let mut out = Vec::new();
            for f in feeds {
                let feed = g.constant(Tensor::matrix(1, 3, f.clone()).unwrap());
                let y = dec.step(&mut g, feed).unwrap();
                let yp = label_head(&mut g, p.label_head.as_ref().unwrap(), y, 0.85).unwrap();
                out.push(g.value(yp).data().to_vec());
            }
            out
        };
        let start = vec![1.0 / 3.0; 3];
        let predicted = replay(&[start.clone(), steps[0].clone(), steps[1].clone()]);
        assert_eq!(predicted, steps);

        let (_, forced, _) = step_inputs(ModelKind::V2ls, FeedMode::TeacherForced);
        let expected = replay(&[start, vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(forced, expected);
    }

    #[test]
    fn mean_and_step_counts() {
        let (_, steps, vectors) = step_inputs(ModelKind::V2vsls, FeedMode::Predicted);
        assert_eq!((steps.len(), vectors.len()), (3, 3));
        let (_, steps, vectors) = step_inputs(ModelKind::V2vs, FeedMode::Predicted);
        assert_eq!((steps.len(), vectors.len()), (0, 3));

        let mut cfg = ModelConfig::new(ModelKind::V2vsls, 3, 3);
        cfg.k = 5;
        cfg.hidden = 6;
        let m = Model::new(cfg, 3).unwrap();
        let out = m.predict_batch(&[0.2, 0.1, -0.3, 1.0, 0.0, 0.5], None).unwrap();
        for bundle in &out {
            assert_eq!(bundle.steps.len(), 5);
            for c in 0..3 {
                let avg = bundle.steps.iter().map(|s| s[c]).sum::<f64>() / 5.0;
                assert!((avg - bundle.mean[c]).abs() < 1e-9);
            }
            assert!((bundle.mean.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        let mut cfg = ModelConfig::new(ModelKind::V2ls, 3, 3);
        cfg.k = 1;
        let m = Model::new(cfg, 3).unwrap();
        let out = m.predict_batch(&[0.2, 0.1, -0.3], None).unwrap();
        assert_eq!(out[0].mean, out[0].steps[0]);
    }

    #[test]
    fn loss_closed_forms() {
        let m = zero_model(ModelKind::V2ls, 2, 2, 3);
        let store = m.store().clone();
        let mut g = Graph::new(&store);
        let fwd = m
            .forward(
                &mut g,
                BatchInput {
                    x: &[1.0, 2.0],
                    memory: None,
                    teacher: None,
                },
                Mode::Eval,
                &mut rng::stream(0, "t", &[]),
            )
            .unwrap();
        let t = BatchTargets {
            labels: &[0, 1, 1],
            vectors: &[],
            ground_truth: &[1],
        };
        let loss = m.loss(&mut g, &fwd, t).unwrap();
        let expected = (1.0 + 9.5) * 2f64.ln();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn inputs_are_distinguished_at_random_init() {
        let m = Model::new(ModelConfig::new(ModelKind::V2ls, 3, 2), 11).unwrap();
        let store = m.store().clone();
        let p = m.seq2seq_params().unwrap();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let b = g.constant(Tensor::matrix(1, 3, vec![-0.3, 0.2, 0.9]).unwrap());
        let (ha, _) = encode(&mut g, &p.encoder, a).unwrap();
        let (hb, _) = encode(&mut g, &p.encoder, b).unwrap();
        assert_ne!(g.value(ha).data(), g.value(hb).data());
    }
}
