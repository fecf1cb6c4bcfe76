//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line. Blank lines are ignored and `#`
//! starts a comment that runs to the end of the line. Keys are case-sensitive
//! and may appear at most once. List values are comma-separated.
//!
//! ```text
//! # train on two tasks
//! tasks = zdt1:d=8:m=2, dtlz2:d=8:m=3
//! rounds = 40
//! n_init = 20
//! fe_max = 40
//! agent.h = 16
//! surrogate.backend = ensemble
//! ```
//!
//! Layering is defaults, then the paper-scale preset (if requested), then the
//! file, then command-line flags.

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

use metasaea_core::agent::{AgentConfig, ControlMode, EnvConfig};
use metasaea_core::infill::CriterionId;
use metasaea_core::problems::{ProblemKind, ProblemSpec};
use metasaea_core::{Error, Result};

/// Training dimensions at desk scale.
pub const DESK_DIMS: [usize; 2] = [8, 10];
/// Training dimensions of the full-scale schedule.
pub const PAPER_DIMS: [usize; 3] = [15, 20, 25];
pub const DESK_ROUNDS: usize = 40;
pub const PAPER_ROUNDS: usize = 200;

/// Scalar type of the learned components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(s, "expected f32 or f64")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Explicit task list. When empty, tasks are `families × dims`.
    pub tasks: Vec<ProblemSpec>,
    pub families: Vec<ProblemKind>,
    pub dims: Vec<usize>,
    /// Dimension of held-out test tasks.
    pub test_dim: usize,
    pub seed: u64,
    /// Independent test repeats per evaluated task.
    pub repeats: usize,
    pub rounds: usize,
    pub episodes_per_env: usize,
    pub workers: usize,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Comparison policy for `eval`; ignored when `baseline_checkpoint` is set.
    pub baseline: ControlMode,
    pub baseline_checkpoint: Option<PathBuf>,
    /// Criterion driving the surrogate benchmark run.
    pub bench_criterion: CriterionId,
    pub hv_points: Option<PathBuf>,
    pub hv_reference: Option<Vec<f64>>,
    pub agent: AgentConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            families: ProblemKind::ALL.to_vec(),
            dims: DESK_DIMS.to_vec(),
            test_dim: 30,
            seed: 0,
            repeats: 10,
            rounds: DESK_ROUNDS,
            episodes_per_env: 1,
            workers: 1,
            precision: Precision::F64,
            out_dir: PathBuf::from("metasaea-out"),
            checkpoint: None,
            baseline: ControlMode::Random,
            baseline_checkpoint: None,
            bench_criterion: CriterionId::NdA,
            hv_points: None,
            hv_reference: None,
            agent: AgentConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-scale schedule: training dims {15, 20, 25} and 200 rounds.
    pub fn paper_scale() -> Self {
        Self {
            dims: PAPER_DIMS.to_vec(),
            rounds: PAPER_ROUNDS,
            ..Self::default()
        }
    }

    /// Parses `text` on top of the desk or paper-scale defaults.
    pub fn parse(text: &str, paper_scale: bool) -> Result<Self> {
        let mut cfg = if paper_scale { Self::paper_scale() } else { Self::default() };
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "duplicate key"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, paper_scale: bool) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, paper_scale)
    }

    /// Applies one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.agent;
        let e = &mut self.env;
        match key {
            "tasks" => self.tasks = list(value)?,
            "families" => self.families = list(value)?,
            "dims" => self.dims = list_with(value, key)?,
            "test_dim" => self.test_dim = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "repeats" => self.repeats = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "episodes_per_env" => self.episodes_per_env = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "precision" => self.precision = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "baseline" => self.baseline = value.parse()?,
            "baseline_checkpoint" => self.baseline_checkpoint = Some(PathBuf::from(value)),
            "bench.criterion" => self.bench_criterion = value.parse()?,
            "hv.points" => self.hv_points = Some(PathBuf::from(value)),
            "hv.reference" => self.hv_reference = Some(list_with(value, key)?),
            "n_init" => e.n_init = num(key, value)?,
            "fe_max" => e.fe_max = num(key, value)?,
            "infill_k" => e.infill_k = num(key, value)?,
            "control" => a.control = value.parse()?,
            "ela.mode" => a.ela_mode = value.parse()?,
            "agent.gamma" => a.gamma = num(key, value)?,
            "agent.lr" => a.lr = num(key, value)?,
            "agent.batch" => a.batch = num(key, value)?,
            "agent.eps_start" => a.eps_start = num(key, value)?,
            "agent.eps_end" => a.eps_end = num(key, value)?,
            "agent.eps_decay_fraction" => a.eps_decay_fraction = num(key, value)?,
            "agent.target_sync" => a.target_sync = num(key, value)?,
            "agent.lambda" => a.lambda = num(key, value)?,
            "agent.max_consecutive_resamples" => a.max_consecutive_resamples = num(key, value)?,
            "agent.huber_delta" => a.huber_delta = num(key, value)?,
            "agent.grad_clip" => a.grad_clip = num(key, value)?,
            "agent.h" => a.h = num(key, value)?,
            "agent.hidden" => a.hidden = num(key, value)?,
            "agent.updates_per_round" => a.updates_per_round = num(key, value)?,
            "surrogate.backend" => e.surrogate.backend = value.parse()?,
            "surrogate.bins" => e.surrogate.bins = num(key, value)?,
            "surrogate.members" => e.surrogate.members = num(key, value)?,
            "surrogate.features" => e.surrogate.features = num(key, value)?,
            "surrogate.ridge" => e.surrogate.ridge = num(key, value)?,
            "surrogate.smoothing" => e.surrogate.smoothing = Some(num(key, value)?),
            "surrogate.gp_noise" => e.surrogate.gp_noise = num(key, value)?,
            "evolve.pop_size" => e.evolve.pop_size = num(key, value)?,
            "evolve.sbx_eta" => e.evolve.sbx_eta = num(key, value)?,
            "evolve.sbx_prob" => e.evolve.sbx_prob = num(key, value)?,
            "evolve.pm_eta" => e.evolve.pm_eta = num(key, value)?,
            "evolve.pm_prob" => e.evolve.pm_prob = Some(num(key, value)?),
            "evolve.divisions" => e.evolve.divisions = Some(num(key, value)?),
            "evolve.generator" => e.evolve.generator = value.to_string(),
            "infill.theta_conv" => e.infill.theta_conv = num(key, value)?,
            "infill.theta_div" => e.infill.theta_div = num(key, value)?,
            "infill.explore_sigma" => e.infill.explore_sigma = num(key, value)?,
            "infill.exploit_sigma" => e.infill.exploit_sigma = num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.env.evolve.validate()?;
        if self.env.n_init == 0 || self.env.fe_max <= self.env.n_init {
            return Err(Error::config("fe_max", "must exceed n_init, which must be positive"));
        }
        if self.episodes_per_env == 0 {
            return Err(Error::config("episodes_per_env", "must be at least 1"));
        }
        if self.dims.contains(&0) || self.test_dim == 0 {
            return Err(Error::config("dims", "dimensions must be positive"));
        }
        Ok(())
    }

    /// The explicit task list, or every family at every training dimension.
    pub fn training_tasks(&self) -> Result<Vec<ProblemSpec>> {
        if !self.tasks.is_empty() {
            return Ok(self.tasks.clone());
        }
        tasks_for(&self.families, &self.dims)
    }

    /// Tasks for single-task commands: the explicit list, else every family at `test_dim`.
    pub fn test_tasks(&self) -> Result<Vec<ProblemSpec>> {
        if !self.tasks.is_empty() {
            return Ok(self.tasks.clone());
        }
        tasks_for(&self.families, &[self.test_dim])
    }
}

/// Every family at every dimension, each with its default objective count.
pub fn tasks_for(families: &[ProblemKind], dims: &[usize]) -> Result<Vec<ProblemSpec>> {
    let mut out = Vec::with_capacity(families.len() * dims.len());
    for &kind in families {
        for &d in dims {
            out.push(ProblemSpec::new(kind, d, kind.default_objectives())?);
        }
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn list<T: FromStr<Err = Error>>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn list_with<T: FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}
