use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A discrete distribution over `K` contiguous value bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BinnedPrediction<T: Scalar = f64> {
    /// `K + 1` strictly ascending edges.
    pub edges: Vec<T>,
    /// `K` bin probabilities summing to one.
    pub probs: Vec<T>,
}

impl<T: Scalar> BinnedPrediction<T> {
    pub fn new(edges: Vec<T>, probs: Vec<T>) -> Result<Self> {
        if edges.len() != probs.len() + 1 || probs.is_empty() {
            return Err(Error::Shape {
                op: "binned prediction",
                lhs: vec![edges.len()],
                rhs: vec![probs.len()],
            });
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("bin edges must be strictly ascending"));
        }
        Ok(Self { edges, probs })
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn midpoints(&self) -> impl Iterator<Item = T> + '_ {
        let half = T::lit(0.5);
        self.edges.windows(2).map(move |w| (w[0] + w[1]) * half)
    }

    /// Mean and standard deviation of the bin-midpoint distribution.
    pub fn moments(&self) -> (T, T) {
        let mean: T = self.midpoints().zip(&self.probs).map(|(mu, &p)| p * mu).sum();
        let var: T = self
            .midpoints()
            .zip(&self.probs)
            .map(|(mu, &p)| p * (mu - mean) * (mu - mean))
            .sum();
        (mean, var.max(T::zero()).sqrt())
    }
}

/// `k + 1` evenly spaced edges covering the observed values with a 10% margin
/// on each side (a margin of 1 when all values coincide).
pub fn bin_edges(values: &[f64], k: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pad = if range > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
        0.1 * range
    } else {
        1.0
    };
    let (a, b) = (lo - pad, hi + pad);
    (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect()
}

/// Index of the bin containing `v`; values outside the edges land in the edge bins.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let k = edges.len() - 1;
    if v.is_nan() || v <= edges[0] {
        return 0;
    }
    if v >= edges[k] {
        return k - 1;
    }
    let w = (edges[k] - edges[0]) / k as f64;
    let mut i = (((v - edges[0]) / w) as usize).min(k - 1);
    // guard the float rounding at bin boundaries
    while i > 0 && v < edges[i] {
        i -= 1;
    }
    while i + 1 < k && v >= edges[i + 1] {
        i += 1;
    }
    i
}
