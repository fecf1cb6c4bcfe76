use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ela::Ela;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Checkpoint, Linear, ParamSet, Tape, Var};

use super::{ActionId, ActionMask, AgentConfig, OptState};

/// `Q = V + A - mean(A)`.
pub fn dueling_aggregate(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + a - mean).collect()
}

/// Highest-valued allowed action; ties go to the lowest index.
pub fn greedy_action(q: &[f64], mask: ActionMask) -> Result<ActionId> {
    let mut best: Option<(ActionId, f64)> = None;
    for a in mask.allowed() {
        let v = q[a.index()];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map(|(a, _)| a)
        .ok_or_else(|| Error::contract("every action is masked"))
}

/// Dueling head: a two-layer GELU trunk feeding a value and an advantage stream.
#[derive(Clone, Copy, Debug)]
pub struct QNetwork {
    pub trunk1: Linear,
    pub trunk2: Linear,
    pub value: Linear,
    pub advantage: Linear,
}

impl QNetwork {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            trunk1: Linear::new(params, &format!("{name}.trunk1"), input, hidden, rng),
            trunk2: Linear::new(params, &format!("{name}.trunk2"), hidden, hidden, rng),
            value: Linear::new(params, &format!("{name}.value"), hidden, 1, rng),
            advantage: Linear::new(params, &format!("{name}.advantage"), hidden, ActionId::COUNT, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk1.fan_in
    }

    /// `[batch, input] -> [batch, 6]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, s: Var) -> Result<Var> {
        let x = self.trunk1.forward(tape, bound, s)?;
        let x = tape.gelu(x);
        let x = self.trunk2.forward(tape, bound, x)?;
        let x = tape.gelu(x);
        let v = self.value.forward(tape, bound, x)?;
        let a = self.advantage.forward(tape, bound, x)?;
        let batch = tape.shape(a)[0];
        let mean = tape.mean_axis(a, 1)?;
        let mean = tape.reshape(mean, &[batch, 1])?;
        let neg = tape.scale(mean, -T::one());
        let centered = tape.add(a, neg)?;
        tape.add(centered, v)
    }
}

/// Landscape network plus Q-network sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Agent<T: Scalar = f64> {
    pub config: AgentConfig,
    pub params: ParamSet<T>,
    pub ela: Ela,
    pub q: QNetwork,
}

impl<T: Scalar> Agent<T> {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ela = Ela::new(&mut params, config.h, config.ela_mode, &mut rng);
        let q = QNetwork::new(&mut params, "q", ela.output_dim() + 1, config.hidden, &mut rng);
        Ok(Self {
            config,
            params,
            ela,
            q,
        })
    }

    /// Length of the state vector `[z, ρ]`.
    pub fn state_dim(&self) -> usize {
        self.q.input_dim()
    }

    /// Stacks the state vectors of `states` into `[len, state_dim]`.
    pub fn state_rows(&self, tape: &mut Tape<T>, bound: &Bound, states: &[&OptState<T>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(states.len());
        for s in states {
            let z = self.ela.forward_pie(tape, bound, &s.pie)?;
            let rho = tape.constant(vec![1], vec![T::lit(s.rho)])?;
            let row = tape.concat(&[z, rho])?;
            rows.push(tape.reshape(row, &[1, self.state_dim()])?);
        }
        tape.concat(&rows)
    }

    /// Q-values `[len, 6]` of `states` on `tape`.
    pub fn q_rows(&self, tape: &mut Tape<T>, bound: &Bound, states: &[&OptState<T>]) -> Result<Var> {
        let s = self.state_rows(tape, bound, states)?;
        self.q.forward(tape, bound, s)
    }

    /// Q-values of each state under `params` (same layout as `self.params`), without gradients.
    pub fn q_values_with(&self, params: &ParamSet<T>, states: &[&OptState<T>]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let q = self.q_rows(&mut tape, &bound, states)?;
        Ok(tape
            .value(q)
            .chunks(ActionId::COUNT)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    pub fn q_values(&self, s: &OptState<T>) -> Result<Vec<f64>> {
        Ok(self.q_values_with(&self.params, &[s])?.remove(0))
    }

    /// The state vector `[z, ρ]`.
    pub fn state_vector(&self, s: &OptState<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = self.state_rows(&mut tape, &bound, &[s])?;
        Ok(tape.value(v).to_vec())
    }

    /// ε-greedy choice among the allowed actions.
    pub fn act<R: Rng + ?Sized>(
        &self,
        s: &OptState<T>,
        epsilon: f64,
        mask: ActionMask,
        rng: &mut R,
    ) -> Result<ActionId> {
        let allowed = mask.allowed();
        if allowed.is_empty() {
            return Err(Error::contract("every action is masked"));
        }
        let explore = rng.random::<f64>() < epsilon;
        if explore {
            return Ok(allowed[rng.random_range(0..allowed.len())]);
        }
        if allowed.len() == 1 {
            return Ok(allowed[0]);
        }
        greedy_action(&self.q_values(s)?, mask)
    }

    /// Parameters plus an echo of the configuration.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::json!({ "agent": self.config });
        Checkpoint::from_params(&self.params, self.config.h, meta)
    }

    /// Rebuilds an agent from a checkpoint; `expected_h` guards against a configuration mismatch.
    pub fn from_checkpoint(ck: &Checkpoint<T>, expected_h: Option<usize>) -> Result<Self> {
        if let Some(h) = expected_h {
            if h != ck.h {
                return Err(Error::Checkpoint(format!("checkpoint has h={}, configuration has h={h}", ck.h)));
            }
        }
        let config: AgentConfig = serde_json::from_value(ck.meta["agent"].clone())
            .map_err(|e| Error::Checkpoint(format!("missing agent configuration: {e}")))?;
        if config.h != ck.h {
            return Err(Error::Checkpoint("header h disagrees with the stored configuration".into()));
        }
        let mut agent = Self::new(config, 0)?;
        agent.params.load_map(&ck.parameters)?;
        Ok(agent)
    }
}
