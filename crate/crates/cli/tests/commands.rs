use std::path::Path;
use std::process::Command;

use metasaea::commands::{self, log2_ratio, moving_average};
use metasaea::config::{tasks_for, PAPER_DIMS};
use metasaea::output::CsvTable;
use metasaea::RunConfig;
use metasaea_core::agent::{Agent, AgentConfig};
use metasaea_core::ela::ElaMode;
use metasaea_core::problems::ProblemKind;
use metasaea_core::surrogate::Backend;
use metasaea_core::Error;

/// A tiny but complete configuration: two tasks, small budget, small network.
fn smoke(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "tasks = zdt1:d=4:m=2, dtlz2:d=4:m=3\n\
         rounds = 5\n\
         n_init = 10\n\
         fe_max = 14\n\
         evolve.pop_size = 8\n\
         agent.h = 4\n\
         agent.hidden = 8\n\
         agent.batch = 8\n\
         agent.updates_per_round = 1\n\
         repeats = 2\n\
         seed = 3\n\
         out_dir = {}\n",
        dir.display()
    );
    let mut cfg = RunConfig::parse(&text, false).unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg
}

#[test]
fn config_parses_comments_lists_and_module_keys() {
    let cfg = RunConfig::parse(
        "# header\n\
         tasks = zdt1:d=8:m=2, dtlz2:d=8 # trailing\n\
         \n\
         control = infill_only\n\
         ela.mode = true_only\n\
         surrogate.backend = gp\n\
         evolve.pop_size = 20\n\
         infill.theta_div = 5\n\
         agent.lr = 0.001\n",
        false,
    )
    .unwrap();
    assert_eq!(cfg.tasks.len(), 2);
    assert_eq!(cfg.tasks[1].m, 3);
    assert_eq!(cfg.agent.control.name(), "infill_only");
    assert_eq!(cfg.agent.ela_mode, ElaMode::TrueOnly);
    assert_eq!(cfg.env.surrogate.backend, Backend::Gp);
    assert_eq!(cfg.env.evolve.pop_size, 20);
    assert_eq!(cfg.env.infill.theta_div, 5.0);
    assert_eq!(cfg.agent.lr, 0.001);
}

#[test]
fn invalid_task_string_names_the_token() {
    let err = RunConfig::parse("tasks = zdt1:d=8, zdt9:d=8\n", false).unwrap_err();
    match err {
        Error::Config { token, .. } => assert!(token.contains("zdt9"), "token {token}"),
        e => panic!("unexpected {e}"),
    }
    let err = RunConfig::parse("tasks = zdt1:d=eight\n", false).unwrap_err();
    assert!(matches!(err, Error::Config { ref token, .. } if token.contains("d=eight")));
}

#[test]
fn unknown_and_duplicate_keys_are_rejected() {
    assert!(matches!(
        RunConfig::parse("agent.nope = 1\n", false),
        Err(Error::Config { ref token, .. }) if token == "agent.nope"
    ));
    assert!(matches!(
        RunConfig::parse("seed = 1\nseed = 2\n", false),
        Err(Error::Config { ref token, .. }) if token == "seed"
    ));
    assert!(RunConfig::parse("n_init = 40\nfe_max = 40\n", false).is_err());
}

#[test]
fn desk_and_paper_scale_defaults() {
    let desk = RunConfig::parse("", false).unwrap();
    assert_eq!(desk.dims, vec![8, 10]);
    assert_eq!(desk.rounds, 40);
    assert_eq!(desk.test_dim, 30);
    assert_eq!(desk.repeats, 10);
    let paper = RunConfig::parse("", true).unwrap();
    assert_eq!(paper.dims, PAPER_DIMS.to_vec());
    // file keys override the preset
    let mixed = RunConfig::parse("rounds = 7\n", true).unwrap();
    assert_eq!(mixed.rounds, 7);
    assert_eq!(mixed.dims, PAPER_DIMS.to_vec());
}

#[test]
fn paper_scale_folds_hold_24_training_tasks_and_are_disjoint() {
    let cfg = RunConfig::parse("", true).unwrap();
    let folds = commands::loto_folds(&cfg).unwrap();
    assert_eq!(folds.len(), 9);
    for (fold, train, test) in &folds {
        assert_eq!(train.len(), 24);
        assert_eq!(fold.train_tasks.len(), 24);
        assert_eq!(test.d, 30);
        assert!(train.iter().all(|t| t.kind != test.kind));
        assert!(fold.train_tasks.iter().all(|t| !t.starts_with(&format!("{}:", fold.held_out))));
    }
    assert_eq!(tasks_for(&ProblemKind::ALL[..8], &PAPER_DIMS).unwrap().len(), 24);
}

#[test]
fn true_only_halves_state_width() {
    let bi = Agent::<f64>::new(AgentConfig { h: 16, ..Default::default() }, 0).unwrap();
    let tr = Agent::<f64>::new(AgentConfig { h: 16, ela_mode: ElaMode::TrueOnly, ..Default::default() }, 0).unwrap();
    assert_eq!(bi.state_dim(), 33);
    assert_eq!(tr.state_dim(), 17);
}

#[test]
fn moving_average_and_log_ratio() {
    let ma = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 5);
    assert_eq!(ma, vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0]);
    assert_eq!(log2_ratio(2.0, 1.0), 1.0);
    assert_eq!(log2_ratio(0.25, 1.0), -2.0);
    assert!(log2_ratio(0.0, 1.0).is_nan());
}

#[test]
fn smoke_train_writes_metrics_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path(), "");
    let out = commands::cmd_train(&cfg).unwrap();
    assert_eq!(out.round_rewards.len(), 5);
    assert!(out.buffer_at_start.iter().all(|&n| n == 0));
    let metrics = CsvTable::read(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.schema, "metasaea.metrics/v1");
    assert_eq!(
        metrics.header,
        ["round", "env", "episode", "mean_reward_per_true_eval", "final_hv", "epsilon"]
    );
    assert!(metrics.rows.len() >= 5);
    assert_eq!(metrics.rows.len(), 10);
    let eps = metrics.numbers("epsilon").unwrap();
    assert_eq!(eps[0], 1.0);
    assert!(eps.windows(2).all(|w| w[1] <= w[0]));
    let curve = CsvTable::read(&dir.path().join("reward_curve.csv")).unwrap();
    assert_eq!(curve.rows.len(), 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 2);
    assert!(out.checkpoint.exists());
}

#[test]
fn training_is_deterministic_under_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = commands::cmd_train(&smoke(a.path(), "rounds = 2\n")).unwrap();
    let rb = commands::cmd_train(&smoke(b.path(), "rounds = 2\n")).unwrap();
    assert_eq!(ra.round_rewards, rb.round_rewards);
    assert_eq!(
        std::fs::read(a.path().join("checkpoint.json")).unwrap(),
        std::fs::read(b.path().join("checkpoint.json")).unwrap()
    );
}

#[test]
fn eval_is_deterministic_and_writes_log_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let train = smoke(dir.path(), "rounds = 2\n");
    let out = commands::cmd_train(&train).unwrap();
    let extra = format!("checkpoint = {}\n", out.checkpoint.display());
    let mut cfg = smoke(dir.path(), &extra);
    cfg.tasks = vec!["zdt1:d=4:m=2".parse().unwrap()];
    cfg.out_dir = dir.path().join("eval1");
    let e1 = commands::cmd_eval(&cfg).unwrap();
    cfg.out_dir = dir.path().join("eval2");
    let e2 = commands::cmd_eval(&cfg).unwrap();
    assert_eq!(format!("{:?}", e1.rows), format!("{:?}", e2.rows));
    assert_eq!(e1.rows.len(), 2);
    assert_eq!(e1.baseline, "random");
    let table = CsvTable::read(&dir.path().join("eval1/eval.csv")).unwrap();
    assert_eq!(table.schema, "metasaea.eval/v1");
    assert!(table.column("log2_hv_ratio").is_ok());
    let log = CsvTable::read(&dir.path().join("eval1/evals_zdt1_d4_m2.csv")).unwrap();
    assert_eq!(log.header[..4], ["task", "seed", "policy", "t"]);
    assert_eq!(log.header.len(), 4 + 4 + 2);
    // two repeats, two policies, 14 evaluations each
    assert_eq!(log.rows.len(), 2 * 2 * 14);
}

#[test]
fn eval_rejects_checkpoint_with_other_h() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::cmd_train(&smoke(dir.path(), "rounds = 1\n")).unwrap();
    let mut cfg = smoke(dir.path(), &format!("checkpoint = {}\n", out.checkpoint.display()));
    cfg.agent.h = 16;
    let err = commands::cmd_eval(&cfg).unwrap_err();
    let core = err.downcast_ref::<Error>().expect("core error");
    assert!(matches!(core, Error::Checkpoint(_)), "{core}");
}

#[test]
fn loto_writes_disjoint_manifest_and_repeat_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path(), "");
    cfg.tasks.clear();
    cfg.families = vec![ProblemKind::Zdt1, ProblemKind::Zdt2, ProblemKind::Dtlz2];
    cfg.dims = vec![4];
    cfg.test_dim = 5;
    cfg.rounds = 1;
    cfg.repeats = 3;
    let folds = commands::cmd_loto(&cfg).unwrap();
    assert_eq!(folds.len(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("folds.json")).unwrap()).unwrap();
    for f in manifest.as_array().unwrap() {
        let held = f["held_out"].as_str().unwrap();
        let train = f["train_tasks"].as_array().unwrap();
        assert_eq!(train.len(), 2);
        assert!(train.iter().all(|t| !t.as_str().unwrap().starts_with(&format!("{held}:"))));
    }
    let rows = CsvTable::read(&dir.path().join("loto.csv")).unwrap();
    assert_eq!(rows.rows.len(), 9);
    let summary = CsvTable::read(&dir.path().join("loto_summary.csv")).unwrap();
    assert_eq!(summary.rows.len(), 3);
}

#[test]
fn surrogate_bench_logs_both_backends_at_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        &format!(
            "tasks = zdt1:d=4:m=2\nn_init = 20\nfe_max = 60\nevolve.pop_size = 10\nout_dir = {}\n",
            dir.path().display()
        ),
        false,
    )
    .unwrap();
    let out = commands::cmd_surrogate_bench(&cfg).unwrap();
    assert_eq!(out.rows.len(), 80);
    for backend in commands::BENCH_BACKENDS {
        assert_eq!(out.rows.iter().filter(|r| r.backend == backend).count(), 40);
    }
    assert!(out
        .rows
        .iter()
        .all(|r| r.std.iter().chain(&r.mean).all(|v| v.is_finite()) && r.std.iter().all(|&s| s >= 0.0)));
    // a binned prediction collapses to zero spread only when all mass sits in one bin
    assert!(out
        .rows
        .iter()
        .filter(|r| r.backend == Backend::Gp)
        .any(|r| r.std.iter().any(|&s| s > 0.0)));
    let table = CsvTable::read(&dir.path().join("surrogate_bench.csv")).unwrap();
    assert_eq!(table.rows.len(), 80);
    let summary = CsvTable::read(&dir.path().join("surrogate_bench_summary.csv")).unwrap();
    assert_eq!(summary.rows.len(), 2);
    let rmse = summary.numbers("rmse").unwrap();
    assert!(rmse.iter().all(|r| r.is_finite() && *r >= 0.0));
}

#[test]
fn hv_subcommand_reads_points_file() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("pts.csv");
    std::fs::write(&pts, "f1,f2\n0.0,1.0\n1.0,0.0\n0.5,0.5\n").unwrap();
    let cfg = RunConfig::parse(&format!("hv.points = {}\nhv.reference = 2,2\n", pts.display()), false).unwrap();
    // union of three rectangles against (2, 2)
    assert!((commands::cmd_hv(&cfg).unwrap() - 3.25).abs() < 1e-12);

    let conf = dir.path().join("hv.conf");
    std::fs::write(&conf, format!("hv.points = {}\nhv.reference = 2,2\n", pts.display())).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metasaea"))
        .args(["hv", "--config"])
        .arg(&conf)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 3.25).abs() < 1e-12);
}

#[test]
fn binary_reports_bad_task_token() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "tasks = zdt1:d=8, nope:d=3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metasaea"))
        .args(["train", "--config"])
        .arg(&conf)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
