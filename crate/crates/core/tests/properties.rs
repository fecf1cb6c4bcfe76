use proptest::prelude::*;

use metasaea_core::agent::{ActionId, Agent, AgentConfig, Env, EnvConfig};
use metasaea_core::evolve::EvolveConfig;
use metasaea_core::pareto::{dominates, hypervolume, nds};
use metasaea_core::problems::{lhs_init, ProblemKind, ProblemSpec};
use metasaea_core::surrogate::{Backend, SurrogateConfig, SurrogateModel};
use metasaea_core::tensor::Checkpoint;

fn points(max_n: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..1.0f64, m), 1..max_n)
}

fn small_env() -> EnvConfig {
    EnvConfig {
        n_init: 10,
        fe_max: 14,
        evolve: EvolveConfig {
            pop_size: 8,
            ..EvolveConfig::default()
        },
        ..EnvConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fronts_partition_and_are_ordered(pts in points(30, 3)) {
        let fronts = nds(&pts);
        let mut seen: Vec<usize> = fronts.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pts.len()).collect::<Vec<_>>());
        for (k, front) in fronts.iter().enumerate() {
            for &i in front {
                prop_assert!(front.iter().all(|&j| !dominates(&pts[j], &pts[i])));
                if k > 0 {
                    prop_assert!(fronts[k - 1].iter().any(|&j| dominates(&pts[j], &pts[i])));
                }
            }
        }
    }

    #[test]
    fn hypervolume_is_monotone_and_bounded(pts in points(12, 3), extra in prop::collection::vec(0.0..1.0f64, 3)) {
        let r = [1.1; 3];
        let hv = hypervolume(&pts, &r).unwrap();
        prop_assert!(hv >= 0.0 && hv <= 1.1f64.powi(3) + 1e-12);
        let mut more = pts.clone();
        more.push(extra);
        prop_assert!(hypervolume(&more, &r).unwrap() >= hv - 1e-12);
    }

    #[test]
    fn lhs_stratifies_every_column(n in 1usize..20, d in 2usize..6, seed in any::<u64>()) {
        let spec = ProblemSpec::new(ProblemKind::Zdt1, d, 2).unwrap();
        let xs = lhs_init(&spec, n, seed);
        prop_assert_eq!(xs.len(), n);
        for k in 0..d {
            let mut cells: Vec<usize> = xs.iter().map(|x| ((x[k] * n as f64) as usize).min(n - 1)).collect();
            cells.sort_unstable();
            prop_assert_eq!(cells, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn both_backends_give_proper_distributions() {
    let spec = ProblemSpec::new(ProblemKind::Dtlz2, 6, 3).unwrap();
    let xs = lhs_init(&spec, 30, 1);
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| spec.evaluate(x).unwrap()).collect();
    let probes = lhs_init(&spec, 10, 2);
    for backend in [Backend::Ensemble, Backend::Gp] {
        let cfg = SurrogateConfig {
            backend,
            ..SurrogateConfig::default()
        };
        let model = SurrogateModel::fit(&cfg, &xs, &ys, &spec.lower, &spec.upper, 3).unwrap();
        let batch = model.predict_batch(&probes);
        for (i, x) in probes.iter().enumerate() {
            let preds = model.predict(x);
            assert_eq!(preds.len(), 3);
            for (o, p) in preds.iter().enumerate() {
                assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.probs.iter().all(|&q| q >= 0.0));
                let (mean, std) = p.moments();
                assert_eq!(batch.mean[i][o], mean);
                assert_eq!(batch.std[i][o], std);
                assert!(std >= 0.0);
            }
        }
    }
}

#[test]
fn environment_spends_budget_only_on_evaluation() {
    let spec = ProblemSpec::new(ProblemKind::Zdt1, 5, 2).unwrap();
    let mut env = Env::new(spec, small_env(), 4).unwrap();
    assert_eq!(env.archive().len(), 10);
    let r = env.step(ActionId::Resample, 1.0).unwrap();
    assert_eq!((r.reward, r.evaluated, env.archive().len()), (0.0, 0, 10));
    let mut evaluated = 0;
    while !env.is_done() {
        evaluated += env.step(ActionId::NdA, 1.0).unwrap().evaluated;
    }
    assert_eq!(evaluated, 4);
    assert_eq!(env.archive().len(), 14);
}

#[test]
fn checkpoint_round_trip_preserves_q_values() {
    let spec = ProblemSpec::new(ProblemKind::Zdt1, 4, 2).unwrap();
    let env = Env::new(spec, small_env(), 5).unwrap();
    let state = env.observe::<f64>().unwrap();
    let agent = Agent::<f64>::new(
        AgentConfig {
            h: 4,
            ..AgentConfig::default()
        },
        6,
    )
    .unwrap();
    let dir = std::env::temp_dir().join(format!("metasaea-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("agent.json");
    agent.checkpoint().save(&path).unwrap();
    let loaded = Agent::from_checkpoint(&Checkpoint::<f64>::load(&path).unwrap(), Some(4)).unwrap();
    assert_eq!(agent.q_values(&state).unwrap(), loaded.q_values(&state).unwrap());
    assert!(Agent::from_checkpoint(&Checkpoint::<f64>::load(&path).unwrap(), Some(8)).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
