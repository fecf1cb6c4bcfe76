//! Per-objective binned probabilistic surrogates.
//!
//! Every backend answers with a discrete distribution over `K` value bins per
//! objective; mean and spread are then read off the bin midpoints. Two
//! backends are provided: a bootstrap ensemble of random-feature ridge
//! regressors (default) and an exact Gaussian process.

mod binned;
mod ensemble;
mod gp;

pub use binned::{bin_edges, bin_index, BinnedPrediction};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::population::{SurrogatePopulation, TruePopulation};

use ensemble::EnsembleFit;
use gp::GpFit;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    #[default]
    Ensemble,
    Gp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Ensemble => "ensemble",
            Backend::Gp => "gp",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ensemble" => Ok(Backend::Ensemble),
            "gp" => Ok(Backend::Gp),
            _ => Err(Error::config(s, "expected `ensemble` or `gp`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub backend: Backend,
    /// Bin count `K`.
    pub bins: usize,
    /// Ensemble size `B`.
    pub members: usize,
    /// Random Fourier feature count.
    pub features: usize,
    /// Ridge penalty in standardized target units.
    pub ridge: f64,
    /// Additive histogram smoothing per bin; `None` means `0.5 / K`.
    pub smoothing: Option<f64>,
    /// GP observation noise variance.
    pub gp_noise: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Ensemble,
            bins: 32,
            members: 16,
            features: 200,
            ridge: 1e-3,
            smoothing: None,
            gp_noise: 1e-6,
        }
    }
}

impl SurrogateConfig {
    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing.unwrap_or(0.5 / self.bins as f64)
    }
}

#[derive(Clone, Debug)]
enum Fitted {
    Ensemble(EnsembleFit),
    Gp(GpFit),
}

/// One independent binned model per objective, fitted on a snapshot of the archive.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub config: SurrogateConfig,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Bin edges per objective.
    pub edges: Vec<Vec<f64>>,
    fitted: Fitted,
}

impl SurrogateModel {
    /// Fits on `n >= 2` samples; inputs are rescaled to the unit box given by `lower`/`upper`.
    pub fn fit(
        config: &SurrogateConfig,
        x: &[Vec<f64>],
        y: &[Vec<f64>],
        lower: &[f64],
        upper: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: x.len(),
            });
        }
        if x.len() != y.len() {
            return Err(Error::Shape {
                op: "surrogate fit",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        if config.bins < 1 || config.members < 1 || config.features < 1 {
            return Err(Error::config("surrogate", "bins, members and features must be positive"));
        }
        let m = y[0].len();
        let u: Vec<Vec<f64>> = x.iter().map(|r| unit_scale(r, lower, upper)).collect();
        let edges = (0..m)
            .map(|j| bin_edges(&y.iter().map(|r| r[j]).collect::<Vec<_>>(), config.bins))
            .collect();
        let fitted = match config.backend {
            Backend::Ensemble => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Fitted::Ensemble(EnsembleFit::fit(
                    &u,
                    y,
                    config.members,
                    config.features,
                    config.ridge,
                    &mut rng,
                )?)
            }
            Backend::Gp => Fitted::Gp(GpFit::fit(&u, y, config.gp_noise)?),
        };
        Ok(Self {
            config: config.clone(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            edges,
            fitted,
        })
    }

    pub fn fit_population(
        config: &SurrogateConfig,
        pop: &TruePopulation,
        lower: &[f64],
        upper: &[f64],
        seed: u64,
    ) -> Result<Self> {
        Self::fit(config, &pop.x, &pop.y, lower, upper, seed)
    }

    pub fn objectives(&self) -> usize {
        self.edges.len()
    }

    /// One binned distribution per objective.
    pub fn predict(&self, x: &[f64]) -> Vec<BinnedPrediction<f64>> {
        let u = unit_scale(x, &self.lower, &self.upper);
        match &self.fitted {
            Fitted::Ensemble(fit) => {
                let alpha = self.config.smoothing_alpha();
                fit.member_predictions(&u)
                    .iter()
                    .zip(&self.edges)
                    .map(|(preds, edges)| histogram(edges, preds, alpha))
                    .collect()
            }
            Fitted::Gp(fit) => fit
                .posterior(&u)
                .into_iter()
                .zip(&self.edges)
                .map(|((mean, var), edges)| gaussian_bins(edges, mean, (var + fit.noise()).sqrt()))
                .collect(),
        }
    }

    /// Per-objective `(mean, std)` from the binned distributions.
    pub fn predict_moments(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.predict(x).iter().map(|p| p.moments()).unzip()
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> SurrogatePopulation {
        let mut pop = SurrogatePopulation::default();
        for x in xs {
            let (mean, std) = self.predict_moments(x);
            pop.push(x.clone(), mean, std);
        }
        pop
    }

    /// Raw Gaussian posterior `(mean, latent variance)` per objective; `None` for the ensemble.
    pub fn gaussian_posterior(&self, x: &[f64]) -> Option<Vec<(f64, f64)>> {
        match &self.fitted {
            Fitted::Gp(fit) => Some(fit.posterior(&unit_scale(x, &self.lower, &self.upper))),
            Fitted::Ensemble(_) => None,
        }
    }
}

fn unit_scale(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| (v - lo) / (hi - lo))
        .collect()
}

/// Laplace-smoothed histogram of point predictions.
fn histogram(edges: &[f64], preds: &[f64], alpha: f64) -> BinnedPrediction<f64> {
    let k = edges.len() - 1;
    let mut counts = vec![alpha; k];
    for &p in preds {
        counts[bin_index(edges, p)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    BinnedPrediction {
        edges: edges.to_vec(),
        probs: counts.into_iter().map(|c| c / total).collect(),
    }
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian mass per bin; the mass below the first and above the last edge
/// is folded into the edge bins.
fn gaussian_bins(edges: &[f64], mean: f64, sd: f64) -> BinnedPrediction<f64> {
    let k = edges.len() - 1;
    let mut probs = vec![0.0; k];
    if sd <= 0.0 || !sd.is_finite() {
        probs[bin_index(edges, mean)] = 1.0;
    } else {
        let cdf: Vec<f64> = edges.iter().map(|&e| normal_cdf((e - mean) / sd)).collect();
        for i in 0..k {
            probs[i] = (cdf[i + 1] - cdf[i]).max(0.0);
        }
        probs[0] += cdf[0];
        probs[k - 1] += 1.0 - cdf[k];
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    BinnedPrediction {
        edges: edges.to_vec(),
        probs,
    }
}

/// Median Euclidean distance over all distinct pairs.
pub(crate) fn median_pairwise_distance(u: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(u.len() * u.len().saturating_sub(1) / 2);
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            d.push(
                u[i].iter()
                    .zip(&u[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    }
}
