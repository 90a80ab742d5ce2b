use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sfr::experiment::{
    collect_results, regression_demo, run_experiment_on, sweep_inducing, sweep_means, train_all, DeltaMode, DemoConfig,
    ExperimentConfig, Method,
};
use sfr::{Dataset, Error, TrainConfig};

/// Two well-separated Gaussian clusters in 3 dimensions.
fn separable(n: usize, seed: u64) -> Dataset {
    clusters(n, seed, 2.0)
}

fn clusters(n: usize, seed: u64, half_gap: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = DMatrix::from_fn(n, 3, |i, j| {
        let centre = if j == 0 { half_gap * (2.0 * y[i] as f64 - 1.0) } else { 0.0 };
        centre + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let mut d = Dataset::classification("toy", x, y, 2);
    d.class_names = vec!["a".into(), "b".into()];
    d
}

fn quick_config() -> ExperimentConfig {
    ExperimentConfig {
        name: Some("toy".into()),
        seeds: vec![0, 1],
        hidden_widths: vec![10],
        train: TrainConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            max_steps: 600,
            patience: 600,
            prior_precision: 1.0,
            ..TrainConfig::default()
        },
        delta_grid: Some(vec![0.1, 1.0, 10.0]),
        bnn_samples: 20,
        record_timing: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn nn_map_separates_toy_data() {
    let cfg = ExperimentConfig {
        methods: vec![Method::NnMap],
        ..quick_config()
    };
    let results = run_experiment_on(&cfg, &separable(200, 0)).unwrap();
    assert_eq!(results.per_run.len(), 2 * 2);
    for r in &results.per_run {
        assert!(r.error.is_none());
        assert!(r.acc.unwrap() >= 0.99, "{r:?}");
        assert!(r.nlpd.unwrap() >= 0.0);
        assert_eq!(r.m, None);
    }
    let agg = results.aggregate_for(Method::NnMap, DeltaMode::None).unwrap();
    assert_eq!(agg.num_seeds, 2);
    assert!(agg.nlpd_std.is_some());
    assert_eq!(results.dataset.n, 200);
    assert_eq!(results.dataset.c, 2);
    assert_eq!(results.config_hash.len(), 64);
}

#[test]
fn every_method_reports_both_delta_modes() {
    let cfg = quick_config();
    let results = run_experiment_on(&cfg, &separable(160, 1)).unwrap();
    assert_eq!(results.per_run.len(), Method::ALL.len() * 2 * 2);
    for r in &results.per_run {
        assert!(r.error.is_none(), "{r:?}");
        let nlpd = r.nlpd.unwrap();
        assert!(nlpd.is_finite() && nlpd >= 0.0);
        if r.delta_mode == DeltaMode::Tuned && r.method != Method::NnMap {
            assert!(cfg.delta_grid.as_ref().unwrap().contains(&r.delta.unwrap()));
            assert_eq!(r.tune_table.as_ref().unwrap().len(), 3);
        }
        if r.delta_mode == DeltaMode::None && r.method != Method::NnMap {
            assert_eq!(r.delta, Some(1.0));
        }
    }
    for r in results.per_run.iter().filter(|r| matches!(r.method, Method::Sfr | Method::GpSubset)) {
        assert_eq!(r.m, Some(22));
    }
    let single = ExperimentConfig {
        seeds: vec![0],
        methods: vec![Method::Sfr],
        ..cfg
    };
    let one = run_experiment_on(&single, &separable(160, 1)).unwrap();
    assert!(one.aggregates.iter().all(|a| a.nlpd_std.is_none()));
}

#[test]
fn same_config_gives_identical_output() {
    let cfg = ExperimentConfig {
        methods: vec![Method::NnMap, Method::Glm, Method::Sfr],
        ..quick_config()
    };
    let data = separable(120, 2);
    let a = run_experiment_on(&cfg, &data).unwrap();
    let b = run_experiment_on(&cfg, &data).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_csv(&mut csv_a).unwrap();
    b.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    let header = String::from_utf8(csv_a).unwrap();
    assert!(header.starts_with("config_hash,dataset,method,seed,delta_mode,nlpd,acc,M,delta,seconds\n"));
}

#[test]
fn results_are_written_to_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::NnMap],
        seeds: vec![0],
        output_dir: Some(dir.path().join("out")),
        ..quick_config()
    };
    let results = run_experiment_on(&cfg, &separable(80, 3)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("out/results.json")).unwrap();
    assert_eq!(text, results.to_json().unwrap());
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["config_hash", "per_run", "aggregates"] {
        assert!(parsed.get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("out/results.csv").exists());
}

#[test]
fn sweep_shape_and_collapse_self_check() {
    let cfg = quick_config();
    // Overlapping classes keep the dual precisions away from zero.
    let data = clusters(150, 4, 0.3);
    let contexts = train_all(&cfg, &data).unwrap();
    let fractions = [0.01, 0.05, 0.2, 1.0];
    let rows = sweep_inducing(&cfg, &contexts, "toy", &fractions).unwrap();
    assert_eq!(rows.len(), fractions.len() * 2 * cfg.seeds.len());
    for r in &rows {
        assert!(r.nlpd.is_finite());
        match (r.method, r.fraction == 1.0) {
            (Method::Sfr, true) => assert!(r.self_check.unwrap() < 1e-6, "{r:?}"),
            _ => assert!(r.self_check.is_none()),
        }
    }
    assert!(rows.iter().all(|r| r.delta == cfg.train.prior_precision));
    let means = sweep_means(&rows);
    assert_eq!(means.len(), fractions.len() * 2);

    let tuned_cfg = ExperimentConfig { sweep_tune_delta: true, ..cfg.clone() };
    let tuned = sweep_inducing(&tuned_cfg, &contexts, "toy", &[0.2]).unwrap();
    let grid = tuned_cfg.grid().unwrap();
    assert!(tuned.iter().all(|r| grid.values().contains(&r.delta)));

    let run = collect_results(&cfg, &data, &contexts);
    assert!(run.per_run.iter().all(|r| r.error.is_none()));

    let mut csv = Vec::new();
    sfr::experiment::write_sweep_csv(&rows, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), rows.len() + 1);

    assert!(matches!(sweep_inducing(&cfg, &contexts, "toy", &[0.0]), Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    let ok = ExperimentConfig::default();
    ok.validate().unwrap();
    let bad = [
        ExperimentConfig {
            split_fractions: [0.7, 0.2, 0.2],
            ..ok.clone()
        },
        ExperimentConfig {
            inducing_fraction: 0.0,
            ..ok.clone()
        },
        ExperimentConfig {
            inducing_fraction: 1.5,
            ..ok.clone()
        },
        ExperimentConfig {
            seeds: vec![],
            ..ok.clone()
        },
        ExperimentConfig {
            delta_grid: Some(vec![-1.0]),
            ..ok.clone()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    let parsed: Result<ExperimentConfig, _> = serde_json::from_str(r#"{"seedz": [1]}"#);
    assert!(parsed.is_err());
    let parsed: ExperimentConfig = serde_json::from_str(r#"{"seeds": [7], "methods": ["sfr"]}"#).unwrap();
    assert_eq!(parsed.seeds, vec![7]);
    assert_eq!(parsed.split_fractions, ok.split_fractions);
    assert_ne!(parsed.hash(), ok.hash());
}

#[test]
fn demo_grid_is_monotone() {
    let cfg = DemoConfig {
        num_train: 60,
        num_valid: 20,
        hidden_widths: vec![16],
        grid_points: 41,
        train: TrainConfig {
            learning_rate: 1e-2,
            batch_size: 30,
            max_steps: 1000,
            ..DemoConfig::default().train
        },
        ..DemoConfig::default()
    };
    let out = regression_demo(&cfg).unwrap();
    assert_eq!(out.grid.len(), 41);
    assert!(out.grid.windows(2).all(|w| w[0].x < w[1].x));
    assert_eq!(out.grid[0].x, -cfg.grid_range);
    assert_eq!(out.grid[40].x, cfg.grid_range);
    for r in &out.grid {
        assert!(r.sfr_std > 0.0);
        assert!((r.upper - r.sfr_mean - 2.0 * r.sfr_std).abs() < 1e-12);
    }
    let mut csv = Vec::new();
    out.write_grid_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let xs: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[0] < w[1]));
    let mut data = Vec::new();
    out.write_data_csv(&mut data).unwrap();
    let flagged = String::from_utf8(data).unwrap().lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(flagged, out.inducing_x.len());
}
