//! Memory network with K attention hops and a label head after every hop.

use rand::seq::index;
use rand::Rng;

use super::{mean_of, Forward, ModelConfig};
use crate::data::Dataset;
use crate::diff::{register_batch_norm, BatchNormIds, Graph, Linear, Mode, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MemNetParams {
    /// Memory input embedding `A`, shared by every hop.
    pub memory_in: ParamId,
    /// Memory output embedding `C`, shared by every hop.
    pub memory_out: ParamId,
    /// Query embedding `B`.
    pub query: ParamId,
    /// Hop transition `H`.
    pub transition: ParamId,
    pub label_head: Linear,
    /// Vector path `T`, then `W_x`, `b_x`.
    pub vector_transform: Option<ParamId>,
    pub vector_out: Option<Linear>,
    pub query_norm: Option<BatchNormIds>,
}

impl MemNetParams {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, e, c) = (cfg.d, cfg.embed_dim, cfg.classes);
        let memory_in = store.add_uniform("memory_in", &[d, e], d, rng)?;
        let memory_out = store.add_uniform("memory_out", &[d, e], d, rng)?;
        let query = store.add_uniform("query", &[d, e], d, rng)?;
        let transition = store.add_uniform("transition", &[e, e], e, rng)?;
        let label_head = Linear::register(store, "label_head", e, c, rng)?;
        let (vector_transform, vector_out) = if cfg.kind.has_vectors() {
            (
                Some(store.add_uniform("vector_transform", &[e, e], e, rng)?),
                Some(Linear::register(store, "vector_out", e, d, rng)?),
            )
        } else {
            (None, None)
        };
        let query_norm = if cfg.batch_norm {
            Some(register_batch_norm(store, "query_norm", e)?)
        } else {
            None
        };
        Ok(MemNetParams {
            memory_in,
            memory_out,
            query,
            transition,
            label_head,
            vector_transform,
            vector_out,
            query_norm,
        })
    }
}

/// Embeds `[b·n, d]` memory rows into `(m, c)`, each `[b, n, e]`.
pub fn embed_memory(g: &mut Graph<'_>, p: &MemNetParams, memory: Var, b: usize) -> Result<(Var, Var)> {
    let rows = g.value(memory).rows();
    if b == 0 || rows % b != 0 {
        return Err(Error::dim("embed_memory", g.value(memory).shape(), &[b]));
    }
    let n = rows / b;
    let a = g.param(p.memory_in);
    let cw = g.param(p.memory_out);
    let e = g.value(a).cols();
    let m = g.matmul(memory, a)?;
    let c = g.matmul(memory, cw)?;
    Ok((g.reshape(m, &[b, n, e])?, g.reshape(c, &[b, n, e])?))
}

/// One hop. Returns `(H·u + o, o, p)` with `p = softmax(u·m_i)`.
pub fn hop(g: &mut Graph<'_>, u: Var, m: Var, c: Var, transition: Var) -> Result<(Var, Var, Var)> {
    let scores = g.row_dot(m, u)?;
    let p = g.softmax_with_temperature(scores, 1.0)?;
    let o = g.row_weighted_sum(p, c)?;
    let hu = g.matmul(u, transition)?;
    let next = g.add(hu, o)?;
    Ok((next, o, p))
}

pub(crate) fn forward<R: Rng>(
    g: &mut Graph<'_>,
    p: &MemNetParams,
    cfg: &ModelConfig,
    x: Var,
    memory: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    let b = g.value(x).rows();
    let (m, c) = embed_memory(g, p, memory, b)?;
    let bq = g.param(p.query);
    let mut u = g.matmul(x, bq)?;
    if let Some(ids) = p.query_norm {
        u = g.batch_norm(u, ids, mode)?;
    }
    let h = g.param(p.transition);
    let mut out = Forward::default();
    for _ in 0..cfg.k {
        let (next, _, att) = hop(g, u, m, c, h)?;
        out.attention.push(att);
        let z = g.dropout(next, cfg.dropout, mode, rng)?;
        let logits = p.label_head.forward(g, z)?;
        out.steps.push(g.softmax_with_temperature(logits, cfg.tau)?);
        if let (Some(t), Some(wx)) = (p.vector_transform, &p.vector_out) {
            let tw = g.param(t);
            let a = g.matmul(z, tw)?;
            let r = g.relu(a);
            out.vectors.push(wx.forward(g, r)?);
        }
        u = next;
    }
    out.mean = Some(mean_of(g, &out.steps)?);
    Ok(out)
}

/// Draws `n` distinct row indices from `0..total`, never `exclude`.
pub fn sample_memory<R: Rng>(total: usize, n: usize, exclude: Option<usize>, rng: &mut R) -> Result<Vec<usize>> {
    let skip = exclude.filter(|e| *e < total);
    let avail = total - usize::from(skip.is_some());
    if n > avail {
        return Err(Error::InsufficientCandidates {
            required: n,
            available: avail,
        });
    }
    Ok(index::sample(rng, avail, n)
        .into_iter()
        .map(|i| match skip {
            Some(e) if i >= e => i + 1,
            _ => i,
        })
        .collect())
}

/// Concatenates the feature rows of `indices`.
pub fn gather_rows(data: &Dataset, indices: &[usize], out: &mut Vec<f64>) {
    for &i in indices {
        out.extend_from_slice(data.row(i));
    }
}
