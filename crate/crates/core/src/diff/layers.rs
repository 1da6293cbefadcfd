use rand::Rng;

use super::graph::{BatchNormIds, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[inputs, outputs], inputs, rng)?;
        let bias = store.add_uniform(&format!("{name}.bias"), &[outputs], inputs, rng)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

/// Weights of one LSTM cell. Gates are packed `[input | forget | candidate | output]`
/// along the columns of `weight`, whose rows read `[x ; h_prev]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = input + hidden;
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, 4 * hidden], fan_in, rng)?;
        let bias = store.add_uniform(&format!("{name}.bias"), &[4 * hidden], fan_in, rng)?;
        Ok(LstmParams {
            weight,
            bias,
            input,
            hidden,
        })
    }
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_cell_step(
    g: &mut Graph<'_>,
    params: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hsz = params.hidden;
    if g.value(x).cols() != params.input {
        return Err(Error::dim("lstm input", g.value(x).shape(), &[params.input]));
    }
    for v in [h_prev, c_prev] {
        if g.value(v).cols() != hsz || g.value(v).rows() != g.value(x).rows() {
            return Err(Error::dim("lstm state", g.value(v).shape(), g.value(x).shape()));
        }
    }
    let xh = g.concat(&[x, h_prev])?;
    let w = g.param(params.weight);
    let b = g.param(params.bias);
    let z = g.affine(xh, w, b)?;
    let zi = g.slice_cols(z, 0, hsz)?;
    let zf = g.slice_cols(z, hsz, hsz)?;
    let zg = g.slice_cols(z, 2 * hsz, hsz)?;
    let zo = g.slice_cols(z, 3 * hsz, hsz)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Registers scale 1, shift 0, running mean 0 and running variance 1.
pub fn register_batch_norm(store: &mut ParamStore, name: &str, width: usize) -> Result<BatchNormIds> {
    Ok(BatchNormIds {
        gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[width], 1.0))?,
        beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[width]))?,
        running_mean: store.add_state(&format!("{name}.running_mean"), Tensor::zeros(&[width]))?,
        running_var: store.add_state(&format!("{name}.running_var"), Tensor::filled(&[width], 1.0))?,
    })
}
