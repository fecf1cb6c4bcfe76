//! Exact Gaussian-process regression with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

use super::median_pairwise_distance;

#[derive(Clone, Debug)]
struct ObjectiveGp {
    mean: f64,
    signal_var: f64,
    alpha: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Clone, Debug)]
pub(crate) struct GpFit {
    train: Vec<Vec<f64>>,
    lengthscale: f64,
    noise: f64,
    objectives: Vec<ObjectiveGp>,
}

impl GpFit {
    pub(crate) fn fit(u: &[Vec<f64>], y: &[Vec<f64>], noise: f64) -> Result<Self> {
        let n = u.len();
        let m = y[0].len();
        let lengthscale = median_pairwise_distance(u).max(1e-3);
        let corr = DMatrix::from_fn(n, n, |a, b| se(&u[a], &u[b], lengthscale));
        let mut objectives = Vec::with_capacity(m);
        for j in 0..m {
            let mean = y.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let signal_var = y.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            let chol = factor(&corr, signal_var, noise)?;
            let centered = DVector::from_fn(n, |a, _| y[a][j] - mean);
            let alpha = chol.solve(&centered).as_slice().to_vec();
            objectives.push(ObjectiveGp {
                mean,
                signal_var,
                alpha,
                chol,
            });
        }
        Ok(Self {
            train: u.to_vec(),
            lengthscale,
            noise,
            objectives,
        })
    }

    /// Posterior mean and latent variance per objective.
    pub(crate) fn posterior(&self, u: &[f64]) -> Vec<(f64, f64)> {
        let corr: Vec<f64> = self.train.iter().map(|t| se(t, u, self.lengthscale)).collect();
        self.objectives
            .iter()
            .map(|o| {
                let ks = DVector::from_fn(corr.len(), |a, _| o.signal_var * corr[a]);
                let mean = o.mean + ks.iter().zip(&o.alpha).map(|(k, a)| k * a).sum::<f64>();
                let v = o
                    .chol
                    .l_dirty()
                    .solve_lower_triangular(&ks)
                    .expect("non-singular factor");
                let var = (o.signal_var - v.norm_squared()).max(0.0);
                (mean, var)
            })
            .collect()
    }

    pub(crate) fn noise(&self) -> f64 {
        self.noise
    }
}

fn se(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (ls * ls)).exp()
}

/// Cholesky of `signal_var * corr + noise * I`, adding jitter if round-off breaks positivity.
fn factor(corr: &DMatrix<f64>, signal_var: f64, noise: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = corr.nrows();
    let mut jitter = 0.0;
    for _ in 0..6 {
        let mut k = corr * signal_var;
        for i in 0..n {
            k[(i, i)] += noise + jitter;
        }
        if let Some(c) = k.cholesky() {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-10 * signal_var.max(1.0) } else { jitter * 100.0 };
    }
    Err(Error::Numerical("GP kernel matrix not positive definite".into()))
}
