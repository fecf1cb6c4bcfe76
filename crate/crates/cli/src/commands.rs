//! The five subcommands. Each writes its files under `out_dir` and returns a
//! summary for callers that want the numbers without re-reading CSVs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use metasaea_core::agent::{
    self, run_episode, ActionId, Agent, ControlMode, Env, EnvConfig, EpisodeOutcome, TrainingPlan,
};
use metasaea_core::pareto;
use metasaea_core::problems::{ProblemSpec, HV_REFERENCE};
use metasaea_core::surrogate::{Backend, SurrogateModel};
use metasaea_core::tensor::Checkpoint;
use metasaea_core::{sub_seed, Scalar};

use crate::config::{tasks_for, Precision, RunConfig};
use crate::output::{columns, create_csv};

// stream tags under the root seed
const TAG_LOTO_TRAIN: u64 = 11;
const TAG_LOTO_TEST: u64 = 12;
const TAG_EVAL: u64 = 13;
const TAG_BENCH: u64 = 14;

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let s = (i + 1).saturating_sub(w);
            v[s..=i].iter().sum::<f64>() / (i + 1 - s) as f64
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `log2(hv / baseline)`; NaN when either side is zero.
pub fn log2_ratio(hv: f64, baseline: f64) -> f64 {
    if hv > 0.0 && baseline > 0.0 {
        (hv / baseline).log2()
    } else {
        f64::NAN
    }
}

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?))
}

fn map_jobs<J: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    jobs: &[J],
    f: impl Fn(&J) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    match pool {
        Some(p) => p.install(|| jobs.par_iter().map(&f).collect()),
        None => jobs.iter().map(f).collect(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

/// One greedy (or control-mode) episode from a fresh environment.
pub fn rollout<T: Scalar>(
    agent: &Agent<T>,
    spec: &ProblemSpec,
    env: &EnvConfig,
    control: ControlMode,
    seed: u64,
) -> Result<EpisodeOutcome<T>> {
    let env = Env::new(spec.clone(), env.clone(), sub_seed(seed, &[0]))?;
    Ok(run_episode(agent, env, control, 0.0, sub_seed(seed, &[1]), false)?)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainManifest {
    pub tasks: Vec<String>,
    pub rounds: usize,
    pub episodes_per_env: usize,
    pub seed: u64,
    pub control: String,
    pub ela_mode: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub tasks: Vec<String>,
    /// Mean reward per true evaluation of each round.
    pub round_rewards: Vec<f64>,
    /// Window-5 moving average of `round_rewards`.
    pub smoothed: Vec<f64>,
    /// Replay-buffer length at the start of each round.
    pub buffer_at_start: Vec<usize>,
    pub checkpoint: PathBuf,
}

/// Trains one agent on `tasks` and writes the manifest, metrics, reward curve and checkpoint into `dir`.
pub fn train_into<T: Scalar>(cfg: &RunConfig, tasks: Vec<ProblemSpec>, seed: u64, dir: &Path) -> Result<(TrainOutput, Agent<T>)> {
    if tasks.is_empty() {
        bail!("at least one training task is required");
    }
    ensure_dir(dir)?;
    let names: Vec<String> = tasks.iter().map(ProblemSpec::task_string).collect();
    write_json(
        &dir.join("manifest.json"),
        &TrainManifest {
            tasks: names.clone(),
            rounds: cfg.rounds,
            episodes_per_env: cfg.episodes_per_env,
            seed,
            control: cfg.agent.control.name(),
            ela_mode: cfg.agent.ela_mode.name().to_string(),
        },
    )?;
    let plan = TrainingPlan {
        tasks,
        rounds: cfg.rounds,
        episodes_per_env: cfg.episodes_per_env,
        env: cfg.env.clone(),
        seed,
        workers: cfg.workers,
    };
    let mut metrics = create_csv(
        &dir.join("metrics.csv"),
        "metrics",
        &columns(&["round", "env", "episode", "mean_reward_per_true_eval", "final_hv", "epsilon"]),
    )?;
    let mut round_rewards = Vec::with_capacity(cfg.rounds);
    let mut buffer_at_start = Vec::with_capacity(cfg.rounds);
    let mut write_err = None;
    let trainer = agent::train::<T>(cfg.agent.clone(), &plan, |report, _| {
        round_rewards.push(report.mean_reward_per_true_eval());
        buffer_at_start.push(report.buffer_len_at_start);
        let res = (|| -> Result<()> {
            for e in &report.episodes {
                metrics.serialize(e)?;
            }
            metrics.flush()?;
            Ok(())
        })();
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let smoothed = moving_average(&round_rewards, 5);
    let mut curve = create_csv(
        &dir.join("reward_curve.csv"),
        "reward_curve",
        &columns(&["round", "mean_reward_per_true_eval", "moving_average_5"]),
    )?;
    for (i, (r, s)) in round_rewards.iter().zip(&smoothed).enumerate() {
        curve.write_record([i.to_string(), r.to_string(), s.to_string()])?;
    }
    curve.flush()?;
    let checkpoint = dir.join("checkpoint.json");
    trainer.agent.checkpoint().save(&checkpoint)?;
    Ok((
        TrainOutput {
            tasks: names,
            round_rewards,
            smoothed,
            buffer_at_start,
            checkpoint,
        },
        trainer.agent,
    ))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let tasks = cfg.training_tasks()?;
    match cfg.precision {
        Precision::F32 => train_into::<f32>(cfg, tasks, cfg.seed, &cfg.out_dir).map(|r| r.0),
        Precision::F64 => train_into::<f64>(cfg, tasks, cfg.seed, &cfg.out_dir).map(|r| r.0),
    }
}

// ---------------------------------------------------------------- loto

#[derive(Clone, Debug, Serialize)]
pub struct Fold {
    pub fold: usize,
    pub held_out: String,
    pub train_tasks: Vec<String>,
    pub test_task: String,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: Fold,
    pub hvs: Vec<f64>,
    pub mean_hv: f64,
    pub std_hv: f64,
}

/// Leave-one-family-out folds: each family is held out once and tested at `test_dim`.
pub fn loto_folds(cfg: &RunConfig) -> Result<Vec<(Fold, Vec<ProblemSpec>, ProblemSpec)>> {
    if cfg.families.len() < 2 {
        bail!("leave-one-task-out needs at least two task families");
    }
    let mut out = Vec::with_capacity(cfg.families.len());
    for (k, &held) in cfg.families.iter().enumerate() {
        let rest: Vec<_> = cfg.families.iter().copied().filter(|&f| f != held).collect();
        let train = tasks_for(&rest, &cfg.dims)?;
        if train.iter().any(|t| t.kind == held) {
            bail!("fold {k}: held-out family {held} appears in its training set");
        }
        let test = ProblemSpec::new(held, cfg.test_dim, held.default_objectives())?;
        let fold = Fold {
            fold: k,
            held_out: held.to_string(),
            train_tasks: train.iter().map(ProblemSpec::task_string).collect(),
            test_task: test.task_string(),
        };
        out.push((fold, train, test));
    }
    Ok(out)
}

fn loto_generic<T: Scalar>(cfg: &RunConfig) -> Result<Vec<FoldResult>> {
    let folds = loto_folds(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let manifest: Vec<&Fold> = folds.iter().map(|f| &f.0).collect();
    write_json(&cfg.out_dir.join("folds.json"), &manifest)?;
    let mut rows = create_csv(
        &cfg.out_dir.join("loto.csv"),
        "loto",
        &columns(&["fold", "held_out", "test_task", "repeat", "seed", "final_hv"]),
    )?;
    let mut summary = create_csv(
        &cfg.out_dir.join("loto_summary.csv"),
        "loto_summary",
        &columns(&["fold", "held_out", "test_task", "repeats", "mean_hv", "std_hv"]),
    )?;
    let workers = pool(cfg.workers)?;
    let mut results = Vec::with_capacity(folds.len());
    for (fold, train, test) in folds {
        let dir = cfg.out_dir.join(format!("fold{}", fold.fold));
        let seed = sub_seed(cfg.seed, &[TAG_LOTO_TRAIN, fold.fold as u64]);
        let (_, agent) = train_into::<T>(cfg, train, seed, &dir)?;
        let seeds: Vec<u64> = (0..cfg.repeats)
            .map(|r| sub_seed(cfg.seed, &[TAG_LOTO_TEST, fold.fold as u64, r as u64]))
            .collect();
        let control = agent.config.control;
        let hvs: Vec<f64> = map_jobs(workers.as_ref(), &seeds, |&s| {
            Ok(rollout(&agent, &test, &cfg.env, control, s)?.final_hv)
        })?;
        for (r, (&s, hv)) in seeds.iter().zip(&hvs).enumerate() {
            rows.write_record([
                fold.fold.to_string(),
                fold.held_out.clone(),
                fold.test_task.clone(),
                r.to_string(),
                s.to_string(),
                hv.to_string(),
            ])?;
        }
        rows.flush()?;
        let (mean_hv, std_hv) = mean_std(&hvs);
        summary.write_record([
            fold.fold.to_string(),
            fold.held_out.clone(),
            fold.test_task.clone(),
            hvs.len().to_string(),
            mean_hv.to_string(),
            std_hv.to_string(),
        ])?;
        summary.flush()?;
        results.push(FoldResult {
            fold,
            hvs,
            mean_hv,
            std_hv,
        });
    }
    Ok(results)
}

pub fn cmd_loto(cfg: &RunConfig) -> Result<Vec<FoldResult>> {
    match cfg.precision {
        Precision::F32 => loto_generic::<f32>(cfg),
        Precision::F64 => loto_generic::<f64>(cfg),
    }
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub repeat: usize,
    pub seed: u64,
    pub policy_hv: f64,
    pub baseline_hv: f64,
    pub log2_hv_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub policy: String,
    pub baseline: String,
    pub rows: Vec<EvalRow>,
    pub mean_policy_hv: f64,
    pub mean_baseline_hv: f64,
    /// `log2` of the ratio of mean hypervolumes.
    pub log2_mean_ratio: f64,
}

/// Loads a checkpoint, refusing one whose `h` differs from `expected_h`.
pub fn load_agent<T: Scalar>(path: &Path, expected_h: usize) -> Result<Agent<T>> {
    let ck = Checkpoint::<T>::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Agent::from_checkpoint(&ck, Some(expected_h))?)
}

fn eval_generic<T: Scalar>(cfg: &RunConfig) -> Result<EvalOutput> {
    let path = cfg.checkpoint.as_ref().context("eval needs `checkpoint = <file>`")?;
    let agent = load_agent::<T>(path, cfg.agent.h)?;
    let baseline_agent = match &cfg.baseline_checkpoint {
        Some(p) => Some(load_agent::<T>(p, cfg.agent.h)?),
        None => None,
    };
    let (base, base_control) = match &baseline_agent {
        Some(b) => (b, b.config.control),
        None => (&agent, cfg.baseline),
    };
    let policy = format!("greedy:{}", agent.config.control.name());
    let baseline = match &baseline_agent {
        Some(b) => format!("greedy:{}", b.config.control.name()),
        None => cfg.baseline.name(),
    };
    let tasks = cfg.test_tasks()?;
    ensure_dir(&cfg.out_dir)?;
    let mut out = create_csv(
        &cfg.out_dir.join("eval.csv"),
        "eval",
        &columns(&["task", "repeat", "seed", "policy", "baseline", "policy_hv", "baseline_hv", "log2_hv_ratio"]),
    )?;
    let workers = pool(cfg.workers)?;
    let mut rows = Vec::new();
    for (ti, spec) in tasks.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.repeats)
            .map(|r| sub_seed(cfg.seed, &[TAG_EVAL, ti as u64, r as u64]))
            .collect();
        let pairs = map_jobs(workers.as_ref(), &seeds, |&s| {
            let p = rollout(&agent, spec, &cfg.env, agent.config.control, s)?;
            let b = rollout(base, spec, &cfg.env, base_control, s)?;
            Ok((p, b))
        })?;
        let mut header = columns(&["task", "seed", "policy", "t"]);
        header.extend((0..spec.d).map(|j| format!("x{j}")));
        header.extend((0..spec.m).map(|j| format!("y{j}")));
        let log_name = format!("evals_{}_d{}_m{}.csv", spec.kind, spec.d, spec.m);
        let mut log = create_csv(&cfg.out_dir.join(log_name), "evaluations", &header)?;
        for (r, (&s, (p, b))) in seeds.iter().zip(&pairs).enumerate() {
            for (name, o) in [(&policy, p), (&baseline, b)] {
                for (t, (x, y)) in o.archive.x.iter().zip(&o.archive.y).enumerate() {
                    let mut rec = vec![spec.task_string(), s.to_string(), name.clone(), t.to_string()];
                    rec.extend(x.iter().chain(y).map(f64::to_string));
                    log.write_record(&rec)?;
                }
            }
            let row = EvalRow {
                task: spec.task_string(),
                repeat: r,
                seed: s,
                policy_hv: p.final_hv,
                baseline_hv: b.final_hv,
                log2_hv_ratio: log2_ratio(p.final_hv, b.final_hv),
            };
            out.write_record([
                row.task.clone(),
                r.to_string(),
                s.to_string(),
                policy.clone(),
                baseline.clone(),
                row.policy_hv.to_string(),
                row.baseline_hv.to_string(),
                row.log2_hv_ratio.to_string(),
            ])?;
            rows.push(row);
        }
        log.flush()?;
    }
    out.flush()?;
    let mean_policy_hv = mean_std(&rows.iter().map(|r| r.policy_hv).collect::<Vec<_>>()).0;
    let mean_baseline_hv = mean_std(&rows.iter().map(|r| r.baseline_hv).collect::<Vec<_>>()).0;
    Ok(EvalOutput {
        policy,
        baseline,
        rows,
        mean_policy_hv,
        mean_baseline_hv,
        log2_mean_ratio: log2_ratio(mean_policy_hv, mean_baseline_hv),
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    match cfg.precision {
        Precision::F32 => eval_generic::<f32>(cfg),
        Precision::F64 => eval_generic::<f64>(cfg),
    }
}

// ---------------------------------------------------------------- surrogate-bench

pub const BENCH_BACKENDS: [Backend; 2] = [Backend::Ensemble, Backend::Gp];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub task: String,
    pub step: usize,
    pub backend: Backend,
    /// Per-objective predicted means, standard deviations and true values.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub truth: Vec<f64>,
}

impl BenchRow {
    /// Objectives whose true value lies within `mean ± k·std`.
    pub fn covered(&self, k: f64) -> usize {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(&self.truth)
            .filter(|((m, s), t)| (*t - *m).abs() <= k * *s)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub task: String,
    pub backend: Backend,
    pub steps: usize,
    pub rmse: f64,
    /// Fraction of (step, objective) pairs inside `mean ± 2·std`.
    pub coverage_2sigma: f64,
    pub all_finite: bool,
    pub min_std: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<BenchSummary>,
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs a fixed-criterion episode per task; before each true evaluation both
/// backends are fitted on the archive so far and then scored on the new points.
pub fn cmd_surrogate_bench(cfg: &RunConfig) -> Result<BenchOutput> {
    let tasks = cfg.test_tasks()?;
    ensure_dir(&cfg.out_dir)?;
    let mut out = create_csv(
        &cfg.out_dir.join("surrogate_bench.csv"),
        "surrogate_bench",
        &columns(&[
            "task", "step", "backend", "pred_mean", "pred_std_lo", "pred_std_hi", "pred_std", "true_mean",
            "sq_err", "covered_2sigma",
        ]),
    )?;
    let action = ActionId::from_criterion(cfg.bench_criterion);
    let mut rows = Vec::new();
    for (ti, spec) in tasks.iter().enumerate() {
        let root = sub_seed(cfg.seed, &[TAG_BENCH, ti as u64]);
        let mut env = Env::new(spec.clone(), cfg.env.clone(), sub_seed(root, &[0]))?;
        let mut step = 0;
        while !env.is_done() {
            let mut models = Vec::with_capacity(BENCH_BACKENDS.len());
            for backend in BENCH_BACKENDS {
                let mut sc = cfg.env.surrogate.clone();
                sc.backend = backend;
                let fit_seed = sub_seed(root, &[1, step as u64]);
                models.push((
                    backend,
                    SurrogateModel::fit_population(&sc, env.archive(), &spec.lower, &spec.upper, fit_seed)?,
                ));
            }
            let start = env.archive().len();
            env.step(action, cfg.agent.lambda)?;
            let archive = env.archive();
            for i in start..archive.len() {
                for (backend, model) in &models {
                    let (mean, std) = model.predict_moments(&archive.x[i]);
                    let row = BenchRow {
                        task: spec.task_string(),
                        step,
                        backend: *backend,
                        mean,
                        std,
                        truth: archive.y[i].clone(),
                    };
                    let sq = row.mean.iter().zip(&row.truth).map(|(m, t)| (m - t).powi(2)).collect::<Vec<_>>();
                    let (pm, ps) = (avg(&row.mean), avg(&row.std));
                    out.write_record([
                        row.task.clone(),
                        step.to_string(),
                        backend.to_string(),
                        pm.to_string(),
                        (pm - ps).to_string(),
                        (pm + ps).to_string(),
                        ps.to_string(),
                        avg(&row.truth).to_string(),
                        avg(&sq).to_string(),
                        (row.covered(2.0) as f64 / row.mean.len() as f64).to_string(),
                    ])?;
                    rows.push(row);
                }
            }
            step += 1;
        }
    }
    out.flush()?;
    let mut summaries = Vec::new();
    for spec in &tasks {
        let task = spec.task_string();
        for backend in BENCH_BACKENDS {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.task == task && r.backend == backend).collect();
            let pairs = sel.iter().map(|r| r.mean.len()).sum::<usize>();
            let sse: f64 = sel
                .iter()
                .flat_map(|r| r.mean.iter().zip(&r.truth).map(|(m, t)| (m - t).powi(2)))
                .sum();
            summaries.push(BenchSummary {
                task: task.clone(),
                backend,
                steps: sel.len(),
                rmse: (sse / pairs as f64).sqrt(),
                coverage_2sigma: sel.iter().map(|r| r.covered(2.0)).sum::<usize>() as f64 / pairs as f64,
                all_finite: sel
                    .iter()
                    .all(|r| r.mean.iter().chain(&r.std).all(|v| v.is_finite())),
                min_std: sel.iter().flat_map(|r| r.std.iter().copied()).fold(f64::INFINITY, f64::min),
            });
        }
    }
    let mut sw = create_csv(
        &cfg.out_dir.join("surrogate_bench_summary.csv"),
        "surrogate_bench_summary",
        &columns(&["task", "backend", "steps", "rmse", "coverage_2sigma", "min_std"]),
    )?;
    for s in &summaries {
        sw.write_record([
            s.task.clone(),
            s.backend.to_string(),
            s.steps.to_string(),
            s.rmse.to_string(),
            s.coverage_2sigma.to_string(),
            s.min_std.to_string(),
        ])?;
    }
    sw.flush()?;
    Ok(BenchOutput { rows, summaries })
}

// ---------------------------------------------------------------- hv

/// Hypervolume of the points in `hv.points` against `hv.reference` (default 1.1 on every axis).
pub fn cmd_hv(cfg: &RunConfig) -> Result<f64> {
    let path = cfg.hv_points.as_ref().context("hv needs `hv.points = <file>`")?;
    let points = crate::output::read_points(path)?;
    let m = points.first().map(Vec::len).context("no points")?;
    let reference = cfg.hv_reference.clone().unwrap_or_else(|| vec![HV_REFERENCE; m]);
    if reference.len() != m {
        bail!("reference has {} coordinates, points have {m}", reference.len());
    }
    Ok(pareto::hypervolume(&points, &reference)?)
}
