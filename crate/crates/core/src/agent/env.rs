use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ela::pie;
use crate::error::{Error, Result};
use crate::evolve::{EvolveConfig, EvolveState};
use crate::infill::{select_elite, InfillConfig};
use crate::population::TruePopulation;
use crate::problems::{lhs_init, BudgetState, ProblemSpec};
use crate::scalar::Scalar;
use crate::sub_seed;
use crate::surrogate::{SurrogateConfig, SurrogateModel};

use super::{reward, ActionId, ActionMask, ControlMode, OptState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_init: usize,
    pub fe_max: usize,
    /// Candidates truly evaluated per infill step.
    pub infill_k: usize,
    pub surrogate: SurrogateConfig,
    pub evolve: EvolveConfig,
    pub infill: InfillConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_init: BudgetState::DEFAULT_N_INIT,
            fe_max: BudgetState::DEFAULT_FE_MAX,
            infill_k: 1,
            surrogate: SurrogateConfig::default(),
            evolve: EvolveConfig::default(),
            infill: InfillConfig::default(),
        }
    }
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// True evaluations spent by this step.
    pub evaluated: usize,
    pub done: bool,
}

/// One optimization episode on one problem.
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: ProblemSpec,
    pub config: EnvConfig,
    archive: TruePopulation,
    model: SurrogateModel,
    evolve: EvolveState,
    budget: BudgetState,
    consecutive_resamples: usize,
    steps: usize,
    rng: ChaCha8Rng,
}

impl Env {
    /// Evaluates an LHS design of `n_init` points, fits the surrogate and breeds the first candidates.
    pub fn new(spec: ProblemSpec, config: EnvConfig, seed: u64) -> Result<Self> {
        let budget = BudgetState::new(config.n_init, config.fe_max)?;
        if config.infill_k == 0 {
            return Err(Error::config("infill_k", "must be at least 1"));
        }
        let x = lhs_init(&spec, config.n_init, sub_seed(seed, &[0]));
        let y = x.iter().map(|r| spec.evaluate(r)).collect::<Result<Vec<_>>>()?;
        let archive = TruePopulation::new(x, y)?;
        let model = SurrogateModel::fit_population(
            &config.surrogate,
            &archive,
            &spec.lower,
            &spec.upper,
            sub_seed(seed, &[1]),
        )?;
        let evolve = EvolveState::init(
            &config.evolve,
            &archive,
            &model,
            &spec.lower,
            &spec.upper,
            sub_seed(seed, &[2]),
        )?;
        Ok(Self {
            spec,
            config,
            archive,
            model,
            evolve,
            budget,
            consecutive_resamples: 0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, &[3])),
        })
    }

    pub fn archive(&self) -> &TruePopulation {
        &self.archive
    }

    pub fn model(&self) -> &SurrogateModel {
        &self.model
    }

    pub fn evolve(&self) -> &EvolveState {
        &self.evolve
    }

    pub fn budget(&self) -> BudgetState {
        self.budget
    }

    /// Steps taken so far, resamples included.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn consecutive_resamples(&self) -> usize {
        self.consecutive_resamples
    }

    pub fn is_done(&self) -> bool {
        self.budget.exhausted()
    }

    /// Actions permitted now: the control mode's set, minus `Resample` once it
    /// has been chosen `max_resamples` times in a row.
    pub fn mask(&self, control: ControlMode, max_resamples: usize) -> ActionMask {
        let base = control.base_mask();
        if self.consecutive_resamples >= max_resamples {
            base.without(ActionId::Resample)
        } else {
            base
        }
    }

    pub fn observe<T: Scalar>(&self) -> Result<OptState<T>> {
        Ok(OptState {
            pie: pie(&self.archive, self.evolve.current(), &self.spec.lower, &self.spec.upper)?,
            rho: self.budget.progress(),
        })
    }

    /// Normalized hypervolume of the archive.
    pub fn hypervolume(&self) -> Result<f64> {
        self.spec.normalized_hypervolume(&self.archive.y)
    }

    pub fn step(&mut self, action: ActionId, lambda: f64) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::contract("step on a finished episode"));
        }
        self.steps += 1;
        let Some(criterion) = action.criterion() else {
            self.consecutive_resamples += 1;
            self.evolve.resample(&self.model)?;
            return Ok(StepOutcome {
                reward: 0.0,
                evaluated: 0,
                done: false,
            });
        };
        self.consecutive_resamples = 0;
        let current = self.evolve.current();
        let k = self.config.infill_k.min(self.budget.remaining()).min(current.len());
        let elite = select_elite(
            criterion,
            &self.config.infill,
            current,
            &self.archive,
            &self.evolve.dirs,
            k,
        )?;
        let xs: Vec<Vec<f64>> = elite.indices.iter().map(|&i| current.x[i].clone()).collect();
        let ys = xs.iter().map(|x| self.spec.evaluate(x)).collect::<Result<Vec<_>>>()?;
        let prev_front = self.archive.front();
        let start = self.archive.len();
        for (x, y) in xs.into_iter().zip(ys.iter().cloned()) {
            self.archive.push(x, y);
        }
        self.budget.consume(k)?;
        self.model = SurrogateModel::fit_population(
            &self.config.surrogate,
            &self.archive,
            &self.spec.lower,
            &self.spec.upper,
            self.rng.next_u64(),
        )?;
        let r = reward(action, &ys, &prev_front, lambda)?;
        self.evolve
            .after_true_evaluation(&self.archive, start..self.archive.len(), &self.model)?;
        Ok(StepOutcome {
            reward: r,
            evaluated: k,
            done: self.is_done(),
        })
    }
}
