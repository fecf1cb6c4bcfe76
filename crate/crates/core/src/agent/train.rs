use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::TruePopulation;
use crate::problems::ProblemSpec;
use crate::scalar::Scalar;
use crate::sub_seed;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Bound, ParamSet, Tape, Var};

use super::{ActionId, Agent, ControlMode, Env, EnvConfig, OptState, Transition};

/// Transitions of the current round only.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T: Scalar = f64> {
    transitions: Vec<Transition<T>>,
}

impl<T: Scalar> Default for ReplayBuffer<T> {
    fn default() -> Self {
        Self {
            transitions: Vec::new(),
        }
    }
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition<T>) {
        self.transitions.push(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition<T>>) {
        self.transitions.extend(ts);
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    pub fn transitions(&self) -> &[Transition<T>] {
        &self.transitions
    }

    /// Uniform mini-batch: without replacement when the buffer is large enough, with replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition<T>> {
        let n = self.transitions.len();
        if n == 0 {
            return Vec::new();
        }
        if n >= batch {
            index::sample(rng, n, batch)
                .into_iter()
                .map(|i| &self.transitions[i])
                .collect()
        } else {
            (0..batch).map(|_| &self.transitions[rng.random_range(0..n)]).collect()
        }
    }
}

/// Identity of a shared snapshot, valid while the buffer holding it lives.
fn snapshot_key<T: Scalar>(s: &Arc<OptState<T>>) -> usize {
    Arc::as_ptr(s) as usize
}

/// Mean Huber TD error of `batch` against fixed `targets`, built on `tape`.
pub fn td_loss<T: Scalar>(
    agent: &Agent<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[&Transition<T>],
    targets: &[f64],
) -> Result<Var> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::contract("td loss needs one target per transition"));
    }
    // each distinct state goes through the networks once
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut states: Vec<&OptState<T>> = Vec::new();
    let rows: Vec<usize> = batch
        .iter()
        .map(|t| {
            *slot.entry(snapshot_key(&t.s)).or_insert_with(|| {
                states.push(&t.s);
                states.len() - 1
            })
        })
        .collect();
    let q = agent.q_rows(tape, bound, &states)?;
    let width = states.len() * ActionId::COUNT;
    let q = tape.reshape(q, &[width, 1])?;
    let mut select = vec![T::zero(); batch.len() * width];
    for (j, (t, &row)) in batch.iter().zip(&rows).enumerate() {
        select[j * width + row * ActionId::COUNT + t.a.index()] = T::one();
    }
    let select = tape.constant(vec![batch.len(), width], select)?;
    let q_sa = tape.matmul(select, q)?;
    let y = tape.constant(vec![batch.len(), 1], targets.iter().map(|&v| T::lit(v)).collect())?;
    let neg_y = tape.scale(y, -T::one());
    let err = tape.add(q_sa, neg_y)?;
    let h = tape.huber(err, T::lit(agent.config.huber_delta));
    Ok(tape.mean(h))
}

/// Statistics of one training round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub updates: usize,
    pub mean_loss: f64,
    pub grad_steps: u64,
}

/// Owns the online parameters, the target copy and the optimizer.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f64> {
    pub agent: Agent<T>,
    target: ParamSet<T>,
    adam: Adam<T>,
    grad_steps: u64,
    target_cache: HashMap<usize, Vec<f64>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(agent: Agent<T>) -> Self {
        let adam = Adam::new(
            AdamConfig {
                lr: agent.config.lr,
                ..AdamConfig::default()
            },
            &agent.params,
        );
        Self {
            target: agent.params.clone(),
            agent,
            adam,
            grad_steps: 0,
            target_cache: HashMap::new(),
        }
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn target_params(&self) -> &ParamSet<T> {
        &self.target
    }

    /// `r` for terminal transitions, else `r + γ max_{a' allowed} Q_target(s', a')`.
    pub fn td_targets(&mut self, batch: &[&Transition<T>]) -> Result<Vec<f64>> {
        let mut keys: Vec<usize> = Vec::new();
        let mut missing: Vec<&OptState<T>> = Vec::new();
        for t in batch {
            let key = snapshot_key(&t.s_next);
            if !t.done && !self.target_cache.contains_key(&key) && !keys.contains(&key) {
                keys.push(key);
                missing.push(&t.s_next);
            }
        }
        let qs = self.agent.q_values_with(&self.target, &missing)?;
        self.target_cache.extend(keys.into_iter().zip(qs));
        let gamma = self.agent.config.gamma;
        batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.r);
                }
                let q = &self.target_cache[&snapshot_key(&t.s_next)];
                let allowed = if t.next_mask.is_empty() {
                    ActionId::ALL.to_vec()
                } else {
                    t.next_mask.allowed()
                };
                let best = allowed
                    .iter()
                    .map(|a| q[a.index()])
                    .fold(f64::NEG_INFINITY, f64::max);
                Ok(t.r + gamma * best)
            })
            .collect()
    }

    /// One clipped Adam step on the TD loss of `batch`; returns the loss.
    pub fn update(&mut self, batch: &[&Transition<T>]) -> Result<f64> {
        let targets = self.td_targets(batch)?;
        let mut tape = Tape::new();
        let bound = self.agent.params.bind(&mut tape);
        let loss = td_loss(&self.agent, &mut tape, &bound, batch, &targets)?;
        let value = tape.value(loss)[0].as_f64();
        let mut grads = tape.backward(loss)?;
        let flat = self.agent.params.collect_grads(&bound, &mut grads);
        self.agent.params.zero_grad();
        self.agent.params.accumulate_grads(&flat);
        clip_grad_norm(&mut self.agent.params, T::lit(self.agent.config.grad_clip));
        self.adam.step(&mut self.agent.params);
        self.grad_steps += 1;
        if self.grad_steps % self.agent.config.target_sync == 0 {
            self.target.copy_from(&self.agent.params)?;
            self.target_cache.clear();
        }
        Ok(value)
    }

    /// `updates_per_round` mini-batch updates over `buffer`.
    pub fn train_round<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer<T>, rng: &mut R) -> Result<RoundStats> {
        if buffer.is_empty() {
            return Err(Error::contract("training round on an empty replay buffer"));
        }
        // cached targets are keyed by snapshot address, valid for this buffer only
        self.target_cache.clear();
        let mut total = 0.0;
        let updates = self.agent.config.updates_per_round;
        for _ in 0..updates {
            let batch = buffer.sample(self.agent.config.batch, rng);
            total += self.update(&batch)?;
        }
        self.target_cache.clear();
        Ok(RoundStats {
            updates,
            mean_loss: if updates > 0 { total / updates as f64 } else { 0.0 },
            grad_steps: self.grad_steps,
        })
    }
}

/// Everything one episode produced.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome<T: Scalar = f64> {
    pub task: String,
    pub transitions: Vec<Transition<T>>,
    pub total_reward: f64,
    pub true_evals: usize,
    pub resamples: usize,
    pub steps: usize,
    /// Longest run of consecutive `Resample` actions.
    pub max_resample_run: usize,
    pub final_hv: f64,
    pub archive: TruePopulation,
    pub actions: Vec<ActionId>,
}

impl<T: Scalar> EpisodeOutcome<T> {
    pub fn mean_reward_per_true_eval(&self) -> f64 {
        if self.true_evals == 0 {
            0.0
        } else {
            self.total_reward / self.true_evals as f64
        }
    }
}

/// Runs `env` to completion. `Random` control overrides `epsilon` with 1.
pub fn run_episode<T: Scalar>(
    agent: &Agent<T>,
    mut env: Env,
    control: ControlMode,
    epsilon: f64,
    seed: u64,
    collect: bool,
) -> Result<EpisodeOutcome<T>> {
    let epsilon = if control == ControlMode::Random { 1.0 } else { epsilon };
    let cfg = &agent.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_start = env.archive().len();
    let mut s = Arc::new(env.observe::<T>()?);
    let mut out = EpisodeOutcome {
        task: env.spec.task_string(),
        transitions: Vec::new(),
        total_reward: 0.0,
        true_evals: 0,
        resamples: 0,
        steps: 0,
        max_resample_run: 0,
        final_hv: 0.0,
        archive: TruePopulation::default(),
        actions: Vec::new(),
    };
    let mut run = 0;
    while !env.is_done() {
        let mask = env.mask(control, cfg.max_consecutive_resamples);
        let a = agent.act(&s, epsilon, mask, &mut rng)?;
        let step = env.step(a, cfg.lambda)?;
        let s_next = Arc::new(env.observe::<T>()?);
        if collect {
            out.transitions.push(Transition {
                s: Arc::clone(&s),
                a,
                r: step.reward,
                s_next: Arc::clone(&s_next),
                done: step.done,
                next_mask: env.mask(control, cfg.max_consecutive_resamples),
            });
        }
        out.total_reward += step.reward;
        out.true_evals += step.evaluated;
        out.steps += 1;
        out.actions.push(a);
        if a == ActionId::Resample {
            out.resamples += 1;
            run += 1;
            out.max_resample_run = out.max_resample_run.max(run);
        } else {
            run = 0;
        }
        s = s_next;
    }
    debug_assert_eq!(out.true_evals, env.archive().len() - n_start);
    out.final_hv = env.hypervolume()?;
    out.archive = env.archive().clone();
    Ok(out)
}

/// One episode to sample in a round.
#[derive(Clone, Debug)]
pub struct EpisodeJob {
    pub env_index: usize,
    pub episode: usize,
    pub spec: ProblemSpec,
    pub seed: u64,
    pub epsilon: f64,
}

/// Runs `jobs` against a shared read-only agent, in parallel when a pool is
/// given; results come back in job order.
pub fn sample_episodes<T: Scalar>(
    agent: &Agent<T>,
    jobs: &[EpisodeJob],
    env_config: &EnvConfig,
    collect: bool,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<EpisodeOutcome<T>>> {
    let run = |job: &EpisodeJob| -> Result<EpisodeOutcome<T>> {
        let env = Env::new(job.spec.clone(), env_config.clone(), sub_seed(job.seed, &[0]))?;
        run_episode(agent, env, agent.config.control, job.epsilon, sub_seed(job.seed, &[1]), collect)
    };
    match pool {
        Some(p) => p.install(|| jobs.par_iter().map(run).collect()),
        None => jobs.iter().map(run).collect(),
    }
}

/// Per-episode metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub round: usize,
    pub env: String,
    pub episode: usize,
    pub mean_reward_per_true_eval: f64,
    pub final_hv: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    /// Replay-buffer size when the round began.
    pub buffer_len_at_start: usize,
    pub transitions: usize,
    pub episodes: Vec<EpisodeMetrics>,
    /// Longest run of consecutive resamples seen in the round.
    pub max_resample_run: usize,
    /// True evaluations of each episode.
    pub true_evals: Vec<usize>,
    pub stats: Option<RoundStats>,
}

impl RoundReport {
    /// Mean over episodes of reward per true evaluation.
    pub fn mean_reward_per_true_eval(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.mean_reward_per_true_eval).sum::<f64>() / self.episodes.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainingPlan {
    pub tasks: Vec<ProblemSpec>,
    pub rounds: usize,
    pub episodes_per_env: usize,
    pub env: EnvConfig,
    pub seed: u64,
    /// Sampling threads; 1 runs inline.
    pub workers: usize,
}

// stream tags for the root seed
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EPISODE: u64 = 3;

/// Alternates parallel sampling with frozen parameters and centralized
/// training; the buffer is emptied after every round. `on_round` sees each
/// round's report before the next round starts.
pub fn train<T: Scalar>(
    config: super::AgentConfig,
    plan: &TrainingPlan,
    mut on_round: impl FnMut(&RoundReport, &Trainer<T>) -> Result<()>,
) -> Result<Trainer<T>> {
    if plan.tasks.is_empty() {
        return Err(Error::config("tasks", "at least one training task is required"));
    }
    let agent = Agent::new(config, sub_seed(plan.seed, &[STREAM_INIT]))?;
    let mut trainer = Trainer::new(agent);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(plan.seed, &[STREAM_TRAIN]));
    let pool = if plan.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(plan.workers.min(plan.tasks.len() * plan.episodes_per_env).max(1))
                .build()
                .map_err(|e| Error::config("workers", &e.to_string()))?,
        )
    } else {
        None
    };
    let per_round = plan.tasks.len() * plan.episodes_per_env;
    let total = plan.rounds * per_round;
    let mut buffer = ReplayBuffer::new();
    for round in 0..plan.rounds {
        let buffer_len_at_start = buffer.len();
        let mut jobs = Vec::with_capacity(per_round);
        for (env_index, spec) in plan.tasks.iter().enumerate() {
            for episode in 0..plan.episodes_per_env {
                let global = round * per_round + env_index * plan.episodes_per_env + episode;
                jobs.push(EpisodeJob {
                    env_index,
                    episode,
                    spec: spec.clone(),
                    seed: sub_seed(plan.seed, &[STREAM_EPISODE, round as u64, env_index as u64, episode as u64]),
                    epsilon: trainer.agent.config.epsilon(global, total),
                });
            }
        }
        let learned = trainer.agent.config.control.is_learned();
        let outcomes = sample_episodes(&trainer.agent, &jobs, &plan.env, learned, pool.as_ref())?;
        let mut report = RoundReport {
            round,
            buffer_len_at_start,
            transitions: 0,
            episodes: Vec::with_capacity(outcomes.len()),
            max_resample_run: 0,
            true_evals: Vec::with_capacity(outcomes.len()),
            stats: None,
        };
        for (job, o) in jobs.iter().zip(outcomes) {
            report.episodes.push(EpisodeMetrics {
                round,
                env: o.task.clone(),
                episode: job.episode,
                mean_reward_per_true_eval: o.mean_reward_per_true_eval(),
                final_hv: o.final_hv,
                epsilon: if trainer.agent.config.control == ControlMode::Random {
                    1.0
                } else {
                    job.epsilon
                },
            });
            report.max_resample_run = report.max_resample_run.max(o.max_resample_run);
            report.true_evals.push(o.true_evals);
            buffer.extend(o.transitions);
        }
        report.transitions = buffer.len();
        if learned && !buffer.is_empty() {
            report.stats = Some(trainer.train_round(&buffer, &mut rng)?);
        }
        buffer.clear();
        on_round(&report, &trainer)?;
    }
    Ok(trainer)
}
