//! Bootstrap ensemble of ridge regressors on shared random Fourier features.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::median_pairwise_distance;

#[derive(Clone, Debug)]
pub(crate) struct EnsembleFit {
    /// Frequencies `[features][d]`, already divided by the length-scale.
    freq: Vec<Vec<f64>>,
    phase: Vec<f64>,
    /// Primal weights `[objective][member][features]` in standardized target units.
    weights: Vec<Vec<Vec<f64>>>,
    y_mean: Vec<f64>,
    y_scale: Vec<f64>,
}

impl EnsembleFit {
    pub(crate) fn fit<R: Rng + ?Sized>(
        u: &[Vec<f64>],
        y: &[Vec<f64>],
        members: usize,
        features: usize,
        ridge: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = u.len();
        let d = u[0].len();
        let m = y[0].len();
        let ls = median_pairwise_distance(u).max(1e-3);
        let freq: Vec<Vec<f64>> = (0..features)
            .map(|_| {
                (0..d)
                    .map(|_| StandardNormal.sample(rng))
                    .map(|z: f64| z / ls)
                    .collect()
            })
            .collect();
        let phase: Vec<f64> = (0..features)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let mut fit = Self {
            freq,
            phase,
            weights: vec![Vec::with_capacity(members); m],
            y_mean: vec![0.0; m],
            y_scale: vec![1.0; m],
        };
        for j in 0..m {
            let mean = y.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = y.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            fit.y_mean[j] = mean;
            fit.y_scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }

        let phi: Vec<Vec<f64>> = u.iter().map(|x| fit.features(x)).collect();
        let gram = DMatrix::from_fn(n, n, |a, b| dot(&phi[a], &phi[b]));
        for _ in 0..members {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut g = DMatrix::from_fn(n, n, |a, b| gram[(idx[a], idx[b])]);
            for i in 0..n {
                g[(i, i)] += ridge;
            }
            let chol = g
                .cholesky()
                .ok_or_else(|| Error::Numerical("ensemble ridge system not positive definite".into()))?;
            let rhs = DMatrix::from_fn(n, m, |a, j| (y[idx[a]][j] - fit.y_mean[j]) / fit.y_scale[j]);
            let alpha = chol.solve(&rhs);
            for j in 0..m {
                let mut w = vec![0.0; features];
                for (a, &i) in idx.iter().enumerate() {
                    let c = alpha[(a, j)];
                    for (wk, &pk) in w.iter_mut().zip(&phi[i]) {
                        *wk += c * pk;
                    }
                }
                fit.weights[j].push(w);
            }
        }
        Ok(fit)
    }

    fn features(&self, u: &[f64]) -> Vec<f64> {
        let scale = (2.0 / self.phase.len() as f64).sqrt();
        self.freq
            .iter()
            .zip(&self.phase)
            .map(|(w, &b)| scale * (dot(w, u) + b).cos())
            .collect()
    }

    /// Member predictions `[objective][member]` in original units.
    pub(crate) fn member_predictions(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let phi = self.features(u);
        self.weights
            .iter()
            .enumerate()
            .map(|(j, ws)| {
                ws.iter()
                    .map(|w| self.y_mean[j] + self.y_scale[j] * dot(w, &phi))
                    .collect()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
