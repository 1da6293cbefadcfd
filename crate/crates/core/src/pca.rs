//! Two-component PCA by power iteration with deflation.

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Projection {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let (n, d) = (data.len(), data.dim());
        if n < 2 {
            return Err(Error::Validation(format!("projection needs at least 2 rows, got {n}")));
        }
        if d < 2 {
            return Err(Error::Validation(format!("projection needs at least 2 features, got {d}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for i in 0..n {
            for (c, (x, m)) in centered.iter_mut().zip(data.row(i).iter().zip(&mean)) {
                *c = x - m;
            }
            for a in 0..d {
                for b in a..d {
                    cov[a * d + b] += centered[a] * centered[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        let (v1, l1) = dominant_eigenvector(&cov, d, None);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= l1 * v1[a] * v1[b];
            }
        }
        let (v2, l2) = dominant_eigenvector(&cov, d, Some(&v1));
        Ok(Projection {
            mean,
            components: [v1, v2],
            variances: [l1, l2.max(0.0)],
        })
    }

    pub fn project_row(&self, row: &[f64]) -> [f64; 2] {
        let dot = |c: &[f64]| row.iter().zip(&self.mean).zip(c).map(|((x, m), v)| (x - m) * v).sum();
        [dot(&self.components[0]), dot(&self.components[1])]
    }

    pub fn project(&self, data: &Dataset) -> Vec<[f64; 2]> {
        (0..data.len()).map(|i| self.project_row(data.row(i))).collect()
    }
}

fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|a| m[a * d..(a + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let lead = (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn orthogonalize(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
    }
}

fn dominant_eigenvector(m: &[f64], d: usize, against: Option<&[f64]>) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
    orthogonalize(&mut v, against);
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..MAX_ITERATIONS {
        let mut w = mat_vec(m, d, &v);
        orthogonalize(&mut w, against);
        let n = norm(&w);
        if n < 1e-300 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= n);
        canonical_sign(&mut w);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < TOLERANCE {
            break;
        }
    }
    canonical_sign(&mut v);
    let mv = mat_vec(m, d, &v);
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    (v, lambda)
}
