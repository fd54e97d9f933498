use factornet::datagen::SimSpec;
use factornet::runner::*;
use factornet::Error;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        sim: SimSpec {
            n_train: 100,
            n_valid: 40,
            n_test: 60,
            p: 20,
            k: 3,
            ..SimSpec::default()
        },
        models: vec!["vanillaNN".into(), "PCA_NN_PCA_ADD".into(), "lasso".into()],
        n_seeds: 2,
        search: SearchSpace {
            budget: 2,
            width: vec![8],
            depth: vec![1, 2],
            ..SearchSpace::default()
        },
        train: factornet::training::TrainConfig {
            max_epochs: 15,
            ..Default::default()
        },
        checkpoints: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn bad_configs_are_config_errors() {
    for text in [
        r#"{"seed": 1, "extra": true}"#,
        r#"{"search": {"lr": [0.1, 0.01]}}"#,
        r#"{"search": {"width": []}}"#,
        r#"{"models": ["resnet"]}"#,
        r#"{"models": []}"#,
        r#"{"models": ["lasso", "lasso"]}"#,
        r#"{"n_seeds": 0}"#,
        r#"{"hyper": {"lr": 0}}"#,
    ] {
        let res = ExperimentConfig::from_json(text).and_then(|c| c.validate(Task::Benchmark));
        assert!(matches!(res, Err(Error::Config(_))), "{text}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        models: vec!["nope".into()],
        ..tiny_config()
    };
    assert!(matches!(
        run(Task::Benchmark, &cfg, dir.path(), 1),
        Err(Error::Config(_))
    ));
    // Nothing is written for a rejected configuration.
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn trial_sampling_depends_only_on_the_seed() {
    let space = SearchSpace::default();
    let a = sample_trials(&space, 40, 9);
    assert_eq!(a, sample_trials(&space, 40, 9));
    assert_ne!(a, sample_trials(&space, 40, 10));
    // A shorter budget is a prefix of a longer one.
    assert_eq!(sample_trials(&space, 5, 9)[..], a[..5]);
    for h in &a {
        assert!(h.lr >= space.lr[0] && h.lr <= space.lr[1]);
        assert!(space.width.contains(&h.width) && space.depth.contains(&h.depth));
        assert!(space.batch_size.contains(&h.batch_size));
        assert_eq!(h.k, None);
    }
}

#[test]
fn budget_one_keeps_its_only_trial() {
    let cfg = tiny_config();
    let data = factornet::datagen::generate(&cfg.sim).unwrap();
    let space = SearchSpace {
        budget: 1,
        ..cfg.search.clone()
    };
    let tuned = tune_model("vanillaNN", &data.train, &data.valid, 3, &space, &cfg.train, 5, "t");
    assert_eq!(tuned.trials.len(), 1);
    let (best, v) = tuned.best.unwrap();
    assert_eq!(best, tuned.trials[0].hyper);
    assert_eq!(Some(v), tuned.trials[0].valid_mse);
}

#[test]
fn search_picks_the_lowest_validation_trial() {
    let cfg = tiny_config();
    let data = factornet::datagen::generate(&cfg.sim).unwrap();
    let space = SearchSpace {
        budget: 4,
        ..cfg.search.clone()
    };
    let tuned = tune_model("vanillaNN", &data.train, &data.valid, 3, &space, &cfg.train, 5, "t");
    let (_, v) = tuned.best.unwrap();
    assert!(tuned.trials.iter().all(|t| t.valid_mse.unwrap() >= v));
    let csv = trials_csv(&tuned.trials).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn benchmark_reruns_are_byte_identical() {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(Task::Benchmark, &cfg, a.path(), 1).unwrap();
    let rb = run(Task::Benchmark, &cfg, b.path(), 2).unwrap();
    assert_eq!((ra.n_rows, ra.n_failed), (6, 0));
    assert_eq!((rb.n_rows, rb.n_failed), (6, 0));
    for f in ["results.csv", "trials.csv", "table3.csv", "rank.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    // Evaluation datasets use the seeds after the tuning seed.
    let text = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let col = rdr.headers().unwrap().iter().position(|h| h == "seed").unwrap();
    let mut seeds: Vec<u64> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds, [run_seed(3, 0), run_seed(3, 1)]);
    assert_eq!(seeds, [4, 5]);
}

#[test]
fn budget_zero_uses_the_fixed_block() {
    let mut cfg = tiny_config();
    cfg.search.budget = 0;
    let (table, trials, _) = tune_sim(&cfg).unwrap();
    assert!(trials.is_empty());
    assert_eq!(table["vanillaNN"], Ok(cfg.hyper.clone()));
    assert!(!table.contains_key("lasso"));
}

#[test]
fn tune_task_writes_trials_and_summary() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let r = run(Task::Tune, &cfg, dir.path(), 1).unwrap();
    assert_eq!(r.n_rows, 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary["best"]["vanillaNN"]["lr"].is_number());
    assert_eq!(summary["metadata"]["task"], "tune");
}

fn backtest_config(models: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        models: models.iter().map(|m| m.to_string()).collect(),
        ..ExperimentConfig::default()
    };
    cfg.search.budget = 0;
    cfg.backtest.max_splits = Some(2);
    cfg
}

#[test]
fn perfect_foresight_beats_the_market() {
    let out = run_backtest(&backtest_config(&["perfect_foresight", "zero"])).unwrap();
    let rows = match &out.results {
        factornet::reporting::ResultTable::Portfolio(r) => r.clone(),
        _ => unreachable!(),
    };
    let pf = rows
        .iter()
        .find(|r| r.model == "perfect_foresight" && r.variant == "raw")
        .and_then(|r| r.report.clone())
        .unwrap();
    // Holding the sign of the next return is right on every day that moves.
    assert!(pf.ann_return > 0.0);
    assert_eq!(pf.dir_accuracy, 1.0);
    let sig = &out.signals["perfect_foresight"];
    for t in 0..sig.len() {
        assert!(sig.position[t] * sig.market[t] >= 0.0);
    }
    assert!(out.signals["zero"].position.iter().all(|&p| p == 0.0));
}
