//! Central finite-difference oracle shared by the integration suites.
#![allow(dead_code)]

pub mod gradients;
pub mod pipeline;

use knnseq::diff::{Graph, ParamStore, Tensor, Var};
use knnseq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Graph builder under test: inputs in, any-shaped output var out.
pub type Build<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

/// Reduces `out` to a scalar with fixed random weights so that every output
/// entry contributes a distinct coefficient.
fn scalarize(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.constant(uniform(g.value(out).shape(), 0xfeed));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval(store: &ParamStore, inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out).unwrap();
    g.value(s).data()[0]
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input entry and every trainable parameter entry.
pub fn max_rel_error(store: &ParamStore, inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out).unwrap();
    let back = g.backward(s).unwrap();
    let mut worst: f64 = 0.0;

    for (k, t) in inputs.iter().enumerate() {
        let analytic = back.wrt(vars[k]).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let probe = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[j] += delta;
                eval(store, &moved, build)
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }

    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = back
            .params()
            .get(id)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        for j in 0..p.value.len() {
            let probe = |delta: f64| {
                let mut moved = store.clone();
                moved.get_mut(id).value.data_mut()[j] += delta;
                eval(&moved, inputs, build)
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}
