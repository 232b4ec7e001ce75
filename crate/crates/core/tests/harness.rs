use dpcl::bsc::{BscConfig, BscState};
use dpcl::harness::{
    anytime_eval, dataset_accuracy, emit_results, head_average_loss, load_data, run_experiment, run_on,
    symmetric_grid, weight_landscape_probe, Checkpoint, DataSource, ExperimentConfig, Method,
};
use dpcl::math::RngState;
use dpcl::network::MlpModel;
use dpcl::stream::{make_synthetic_split, StreamConfig};
use dpcl::Error;

fn small(method: Method, tasks: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = method;
    cfg.seed = seed;
    cfg.stream = StreamConfig::disjoint(tasks, seed);
    cfg.data = DataSource::Synthetic {
        classes: 4,
        dims: 8,
        per_class: 120,
        test_per_class: 60,
        spread: 0.35,
    };
    cfg.hidden = vec![32];
    cfg.feature_dim = 16;
    cfg.memory_capacity = 80;
    cfg.eval_every = 100;
    cfg
}

#[test]
fn finetune_forgets_the_first_task() {
    let log = run_experiment(&small(Method::Finetune, 2, 3)).unwrap().log;
    let a = &log.acc_matrix;
    assert!(a[0][0] > 90.0, "{a:?}");
    assert!(a[1][0] < a[0][0] - 50.0, "{a:?}");
    assert!(log.final_fm().unwrap() > 50.0);
}

#[test]
fn single_task_learns_separable_blobs() {
    for method in [Method::Er, Method::Dpcl] {
        let mut cfg = small(method, 1, 11);
        cfg.data = DataSource::Synthetic {
            classes: 4,
            dims: 8,
            per_class: 120,
            test_per_class: 60,
            spread: 0.15,
        };
        let log = run_experiment(&cfg).unwrap().log;
        assert!(log.final_acc().unwrap() >= 95.0, "{method}: {:?}", log.acc_matrix);
    }
}

#[test]
fn untrained_model_is_near_chance() {
    // balanced classes: averaged over random models the expected accuracy is 1/C
    let (_, test) = make_synthetic_split(4, 8, 10, 100, 0.35, 5).unwrap();
    let class_to_task = vec![Some(0); 4];
    let mut total = 0.0;
    let n = 40;
    for seed in 0..n {
        let model = MlpModel::new(8, &[32], 16, 4, 1, &RngState::new(seed)).unwrap();
        let bsc = BscState::new(BscConfig {
            num_heads: 1,
            ..BscConfig::default()
        });
        let acc = anytime_eval(&model, &bsc, &test, &class_to_task, 0, 1, &mut RngState::new(0)).unwrap();
        total += acc[0].unwrap();
    }
    let mean = total / n as f64;
    assert!((mean - 25.0).abs() < 10.0, "mean untrained accuracy {mean}");
}

#[test]
fn evaluation_is_repeatable() {
    let out = run_experiment(&small(Method::Dpcl, 2, 4)).unwrap();
    let (_, test) = load_data(&small(Method::Dpcl, 2, 4)).unwrap();
    let map = out.schedule.class_to_task(4);
    let run = |s| anytime_eval(&out.state.model, &out.state.bsc, &test, &map, 1, 2, &mut RngState::new(s)).unwrap();
    assert_eq!(run(9), run(9));
    let a = dataset_accuracy(&out.state.model, &out.state.bsc, &test, &mut RngState::new(1)).unwrap();
    let b = dataset_accuracy(&out.state.model, &out.state.bsc, &test, &mut RngState::new(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn anytime_eval_hides_future_tasks() {
    let (_, test) = make_synthetic_split(4, 8, 10, 20, 0.35, 5).unwrap();
    let model = MlpModel::new(8, &[8], 4, 4, 1, &RngState::new(0)).unwrap();
    let bsc = BscState::new(BscConfig {
        num_heads: 1,
        ..BscConfig::default()
    });
    let map = vec![Some(0), Some(0), Some(1), None];
    let acc = anytime_eval(&model, &bsc, &test, &map, 0, 3, &mut RngState::new(0)).unwrap();
    assert!(acc[0].is_some());
    assert_eq!(acc[1], None);
    assert_eq!(acc[2], None);
    assert!(anytime_eval(&model, &bsc, &test, &map, 3, 3, &mut RngState::new(0)).is_err());
}

#[test]
fn landscape_origin_is_the_unperturbed_loss() {
    let out = run_experiment(&small(Method::Dpcl, 2, 2)).unwrap();
    let (_, test) = load_data(&small(Method::Dpcl, 2, 2)).unwrap();
    let grid = symmetric_grid(5, 0.5);
    assert_eq!(grid, vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
    let curve = weight_landscape_probe(&out.state.model, &test, &grid, &[0, 1, 2]).unwrap();
    assert_eq!(curve.len(), 5);
    let features = out.state.model.encoder.forward(&test.inputs).unwrap();
    let exact = head_average_loss(&out.state.model.heads, &features, &test.labels).unwrap();
    assert!((curve[2].1 - exact).abs() < 1e-12 * exact.max(1.0));
    // a trained model sits lower than large random perturbations on both sides
    assert!(curve[0].1 > exact && curve[4].1 > exact, "{curve:?}");
    assert!(weight_landscape_probe(&out.state.model, &test, &grid, &[]).is_err());
}

#[test]
fn seed_averaging_reduces_spread() {
    // five-seed means of a noisy statistic vary less than single seeds
    let accs: Vec<f64> = (0..10)
        .map(|s| run_experiment(&small(Method::Er, 2, 100 + s)).unwrap().log.final_acc().unwrap())
        .collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let singles = var(&accs);
    let means = [accs[..5].iter().sum::<f64>() / 5.0, accs[5..].iter().sum::<f64>() / 5.0];
    let spread = (means[0] - means[1]).abs();
    // difference of two 5-seed means has variance 2 * singles / 5
    assert!(spread <= 4.0 * (2.0 * singles / 5.0).sqrt() + 1e-9, "{accs:?}");
}

#[test]
fn summary_round_trips_final_accuracy() {
    let cfg = small(Method::Er, 2, 6);
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(dir.path(), &out.log, &cfg, 1.5, None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["final_acc"].as_f64(), out.log.final_acc());
    assert_eq!(v["final_fm"].as_f64(), out.log.final_fm());
    assert_eq!(v["method"], "er");
    assert_eq!(v["config"]["seed"], "6");
    assert!(!dir.path().join("landscape.csv").exists());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small(Method::Dpcl, 2, 8);
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = Checkpoint::new(cfg.clone(), out.state.clone(), out.standardizer.clone());
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.state, out.state);
    assert_eq!(back.config, cfg);

    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Data(_))));
}

#[test]
fn emit_reports_the_failing_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = small(Method::Finetune, 1, 0);
    let log = dpcl::harness::MetricsLog::new(1);
    let err = emit_results(&blocker.join("out"), &log, &cfg, 0.0, None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("file"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn run_on_matches_run_experiment() {
    let cfg = small(Method::Dpcl, 2, 13);
    let (train, test) = load_data(&cfg).unwrap();
    let a = run_on(&cfg, &train, &test).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.log.acc_matrix, b.log.acc_matrix);
    assert_eq!(a.state, b.state);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(Method::Dpcl, 2, 0);
    cfg.batch_size = 0;
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_) | Error::Parameter(_))));
    let mut cfg = small(Method::Dpcl, 5, 0);
    cfg.stream = StreamConfig::disjoint(5, 0);
    assert!(run_experiment(&cfg).is_err());
}
