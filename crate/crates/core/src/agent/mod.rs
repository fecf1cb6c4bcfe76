//! Meta-policy over the optimizer: at every step a dueling Q-network reads the
//! landscape features plus budget progress and either advances the surrogate
//! search one generation (`Resample`) or spends true evaluations with one of
//! the five infill criteria.

mod env;
mod network;
mod train;

pub use env::{Env, EnvConfig, StepOutcome};
pub use network::{dueling_aggregate, greedy_action, Agent, QNetwork};
pub use train::{
    run_episode, sample_episodes, td_loss, train, EpisodeJob, EpisodeMetrics, EpisodeOutcome, ReplayBuffer,
    RoundReport, RoundStats, Trainer, TrainingPlan,
};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ela::{ElaMode, PieTensors};
use crate::error::{Error, Result};
use crate::infill::CriterionId;
use crate::pareto;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionId {
    /// One more surrogate-space generation, no true evaluation.
    Resample,
    NdA,
    NdDpbiConv,
    NdDpbiDiv,
    EpdiExplore,
    EpdiExploit,
}

impl ActionId {
    pub const COUNT: usize = 6;
    pub const ALL: [ActionId; 6] = [
        ActionId::Resample,
        ActionId::NdA,
        ActionId::NdDpbiConv,
        ActionId::NdDpbiDiv,
        ActionId::EpdiExplore,
        ActionId::EpdiExploit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The infill criterion behind this action; `None` for `Resample`.
    pub fn criterion(self) -> Option<CriterionId> {
        match self {
            ActionId::Resample => None,
            ActionId::NdA => Some(CriterionId::NdA),
            ActionId::NdDpbiConv => Some(CriterionId::NdDpbiConv),
            ActionId::NdDpbiDiv => Some(CriterionId::NdDpbiDiv),
            ActionId::EpdiExplore => Some(CriterionId::EpdiExplore),
            ActionId::EpdiExploit => Some(CriterionId::EpdiExploit),
        }
    }

    pub fn from_criterion(c: CriterionId) -> Self {
        match c {
            CriterionId::NdA => ActionId::NdA,
            CriterionId::NdDpbiConv => ActionId::NdDpbiConv,
            CriterionId::NdDpbiDiv => ActionId::NdDpbiDiv,
            CriterionId::EpdiExplore => ActionId::EpdiExplore,
            CriterionId::EpdiExploit => ActionId::EpdiExploit,
        }
    }

    pub fn name(self) -> &'static str {
        self.criterion().map_or("resample", CriterionId::name)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of currently permitted actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionMask(u8);

impl ActionMask {
    pub const ALL: ActionMask = ActionMask(0b11_1111);
    pub const NONE: ActionMask = ActionMask(0);

    pub fn only(a: ActionId) -> Self {
        ActionMask(1 << a.index())
    }

    pub fn with(self, a: ActionId) -> Self {
        ActionMask(self.0 | (1 << a.index()))
    }

    pub fn without(self, a: ActionId) -> Self {
        ActionMask(self.0 & !(1 << a.index()))
    }

    pub fn allows(self, a: ActionId) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Allowed actions in index order.
    pub fn allowed(self) -> Vec<ActionId> {
        ActionId::ALL.into_iter().filter(|&a| self.allows(a)).collect()
    }
}

/// Which decisions the policy is allowed to make.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMode {
    /// Resample-or-evaluate and the criterion choice.
    #[default]
    Dual,
    /// Criterion choice only; every step evaluates.
    InfillOnly,
    /// Resample-or-evaluate only; evaluation always uses `nd_a`.
    EaOnly,
    /// Uniform random actions.
    Random,
    /// Always the given criterion.
    Fixed(CriterionId),
}

impl ControlMode {
    /// Actions permitted before the resample limit is applied.
    pub fn base_mask(self) -> ActionMask {
        match self {
            ControlMode::Dual | ControlMode::Random => ActionMask::ALL,
            ControlMode::InfillOnly => ActionMask::ALL.without(ActionId::Resample),
            ControlMode::EaOnly => ActionMask::only(ActionId::Resample).with(ActionId::NdA),
            ControlMode::Fixed(c) => ActionMask::only(ActionId::from_criterion(c)),
        }
    }

    /// Whether the Q-network chooses actions (and is therefore trained).
    pub fn is_learned(self) -> bool {
        matches!(self, ControlMode::Dual | ControlMode::InfillOnly | ControlMode::EaOnly)
    }

    pub fn name(self) -> String {
        match self {
            ControlMode::Dual => "dual".into(),
            ControlMode::InfillOnly => "infill_only".into(),
            ControlMode::EaOnly => "ea_only".into(),
            ControlMode::Random => "random".into(),
            ControlMode::Fixed(c) => format!("fixed:{}", c.name()),
        }
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "dual" => Ok(ControlMode::Dual),
            "infill_only" => Ok(ControlMode::InfillOnly),
            "ea_only" => Ok(ControlMode::EaOnly),
            "random" => Ok(ControlMode::Random),
            _ => match t.strip_prefix("fixed:") {
                Some(c) => Ok(ControlMode::Fixed(c.parse()?)),
                None => Err(Error::config(
                    s,
                    "expected dual, infill_only, ea_only, random or fixed:<criterion>",
                )),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Discount factor.
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of all training episodes over which ε decays linearly.
    pub eps_decay_fraction: f64,
    /// Gradient steps between target-network copies.
    pub target_sync: u64,
    /// Weight of the distance bonus in the reward.
    pub lambda: f64,
    pub max_consecutive_resamples: usize,
    pub huber_delta: f64,
    pub grad_clip: f64,
    /// Landscape feature width per space.
    pub h: usize,
    /// Width of both trunk layers.
    pub hidden: usize,
    pub ela_mode: ElaMode,
    pub control: ControlMode,
    /// Mini-batch updates after each sampling round.
    pub updates_per_round: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            target_sync: 200,
            lambda: 1.0,
            max_consecutive_resamples: 5,
            huber_delta: 1.0,
            grad_clip: 10.0,
            h: 16,
            hidden: 64,
            ela_mode: ElaMode::Bi,
            control: ControlMode::Dual,
            updates_per_round: 8,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |token: &str, reason: &str| Err(Error::config(token, reason));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.h == 0 || self.hidden == 0 {
            return bad("h", "network widths must be positive");
        }
        if self.target_sync == 0 {
            return bad("target_sync", "must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.huber_delta > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr", "lr, huber_delta and grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("eps", "ε endpoints must lie in [0, 1]");
        }
        if self.max_consecutive_resamples == 0 {
            return bad("max_consecutive_resamples", "must be at least 1");
        }
        Ok(())
    }

    /// ε for the `episode`-th of `total` training episodes (zero-based).
    pub fn epsilon(&self, episode: usize, total: usize) -> f64 {
        let horizon = self.eps_decay_fraction * total as f64;
        if horizon <= 0.0 {
            return self.eps_end;
        }
        let frac = (episode as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Reward of one step. Zero for `Resample`; otherwise `1 + λ Σ d_i/d_ref` over
/// the new points when the archive front changed as a set, else `-1`.
pub fn reward(action: ActionId, new_points: &[Vec<f64>], prev_front: &[Vec<f64>], lambda: f64) -> Result<f64> {
    if action == ActionId::Resample {
        return Ok(0.0);
    }
    if !front_changed(new_points, prev_front) {
        return Ok(-1.0);
    }
    let mut bonus = 0.0;
    for y in new_points {
        bonus += pareto::manhattan_front_distance(y, prev_front)?.normalized();
    }
    Ok(1.0 + lambda * bonus)
}

/// Whether the non-dominated set of `prev_front ∪ new_points` differs from `prev_front`.
fn front_changed(new_points: &[Vec<f64>], prev_front: &[Vec<f64>]) -> bool {
    let canonical = |mut v: Vec<Vec<f64>>| {
        v.sort_by(|a, b| pareto::lex_cmp(a, b));
        v.dedup();
        v
    };
    let mut union: Vec<Vec<f64>> = prev_front.to_vec();
    union.extend(new_points.iter().cloned());
    let nd = pareto::non_dominated(&union)
        .into_iter()
        .map(|i| union[i].clone())
        .collect();
    let before = pareto::non_dominated(prev_front)
        .into_iter()
        .map(|i| prev_front[i].clone())
        .collect();
    canonical(nd) != canonical(before)
}

/// Raw observation behind one state: both populations in landscape-analysis
/// layout plus budget progress `ρ = t / fe_max`. The feature vector is
/// recomputed through the current landscape network whenever it is needed.
#[derive(Clone, Debug)]
pub struct OptState<T: Scalar = f64> {
    pub pie: PieTensors<T>,
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct Transition<T: Scalar = f64> {
    pub s: Arc<OptState<T>>,
    pub a: ActionId,
    pub r: f64,
    pub s_next: Arc<OptState<T>>,
    pub done: bool,
    /// Actions allowed in `s_next`, used for the bootstrap maximum.
    pub next_mask: ActionMask,
}

#[cfg(test)]
mod tests;
