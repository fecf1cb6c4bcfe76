//! The two evaluation spaces: the archive of truly evaluated solutions and the
//! current surrogate-scored candidate set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pareto;

/// Solutions with their true objective vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruePopulation {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl TruePopulation {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                op: "true population",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) {
        self.x.push(x);
        self.y.push(y);
    }

    /// Objective vectors of the current non-dominated set.
    pub fn front(&self) -> Vec<Vec<f64>> {
        pareto::non_dominated(&self.y)
            .into_iter()
            .map(|i| self.y[i].clone())
            .collect()
    }
}

/// Candidates with predicted means and standard deviations per objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePopulation {
    pub x: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl SurrogatePopulation {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, mean: Vec<f64>, std: Vec<f64>) {
        self.x.push(x);
        self.mean.push(mean);
        self.std.push(std);
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            mean: idx.iter().map(|&i| self.mean[i].clone()).collect(),
            std: idx.iter().map(|&i| self.std[i].clone()).collect(),
        }
    }

    pub fn extend(&mut self, other: &Self) {
        self.x.extend(other.x.iter().cloned());
        self.mean.extend(other.mean.iter().cloned());
        self.std.extend(other.std.iter().cloned());
    }
}
