use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters of one [`ParamSet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    tape.constant(t.shape.clone(), t.data.clone())
                        .expect("tensor invariant holds")
                })
                .collect(),
        }
    }

    /// Extracts per-parameter gradients in set order; unused parameters get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }

    /// Adds flat gradients (as returned by [`collect_grads`](Self::collect_grads)) into `grad`.
    pub fn accumulate_grads(&mut self, flat: &[Vec<T>]) {
        for (t, g) in self.tensors.iter_mut().zip(flat) {
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrites values from a name-keyed map; every parameter must be present with a matching shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape != t.shape || src.data.len() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    src.shape, t.shape
                )));
            }
            t.data.clone_from(&src.data);
        }
        Ok(())
    }
}

/// On-disk parameter snapshot: header plus name-keyed tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T: Scalar = f64> {
    pub format_version: u32,
    pub h: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub parameters: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_params(params: &ParamSet<T>, h: usize, meta: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            h,
            meta,
            parameters: params.to_map(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        for (name, t) in &ck.parameters {
            if super::numel(&t.shape) != t.data.len() {
                return Err(Error::Checkpoint(format!("corrupt tensor {name}")));
            }
        }
        Ok(ck)
    }
}
