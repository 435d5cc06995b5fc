use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use trajgp::design::ModelSpec;
use trajgp::sampler::Draw;
use trajgp::simulate::{gen_dataset, SimConfig, SurfaceConfig};
use trajgp_cli::chainfile::{read_chain, ChainWriter};
use trajgp_cli::commands::MetricsReport;
use trajgp_cli::config::IngestConfig;
use trajgp_cli::ingest::{read_dataset, write_dataset};
use trajgp_cli::split::split;

fn sim_config(n_individuals: usize, n_points: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(n_points, 0.5, vec![1.0, -0.5], seed);
    cfg.n_individuals = n_individuals;
    cfg.intercepts = (0..n_individuals).map(|k| k as f64 * 0.3).collect();
    cfg.surface = Some(SurfaceConfig { degree: 2, n_basis: 5, scale: 0.5 });
    cfg
}

#[test]
fn simulate_then_ingest_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sim_config(3, 500, 11);
    let (ds, _) = gen_dataset(&cfg).unwrap();
    let path = dir.path().join("d.csv");
    write_dataset(&ds, &path).unwrap();
    let spec = ModelSpec { numeric: cfg.covariate_names(), ..ModelSpec::default() };
    let back = read_dataset(&path, &spec, &IngestConfig::default(), None).unwrap();
    assert_eq!(back, ds);
}

fn draw(i: usize, p: usize) -> Draw {
    Draw {
        iteration: i,
        accepted: i.is_multiple_of(3),
        sigma2: 1.0 + i as f64 / 7.0,
        phi: 0.5,
        tau2: 0.25 * i as f64 + 0.1,
        lambda: Some(i as f64),
        psi: (0..p).map(|j| (i * p + j) as f64 / 11.0).collect(),
        loglik: f64::NAN,
    }
}

#[test]
fn truncated_chain_reloads_complete_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.csv");
    let names: Vec<String> = vec!["intercept".into(), "spatial[0,0]".into(), "x1".into()];
    let mut w = ChainWriter::create(&path, &names).unwrap();
    for i in 0..20 {
        w.write(&draw(i, 3)).unwrap();
    }
    drop(w);
    let full = std::fs::read(&path).unwrap();
    let line_ends: Vec<usize> = full.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i).collect();
    // cut at every byte of the last three rows
    for cut in line_ends[17]..full.len() {
        std::fs::write(&path, &full[..cut]).unwrap();
        let chain = read_chain(&path, 0).unwrap();
        let complete = line_ends.iter().filter(|&&e| e < cut).count() - 1;
        assert_eq!(chain.draws.len(), complete, "cut {cut}");
        for (i, d) in chain.draws.iter().enumerate() {
            assert_eq!(d.psi, draw(i, 3).psi);
            assert_eq!(d.tau2, draw(i, 3).tau2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn split_is_a_partition(seed in any::<u64>(), fraction in 0.05f64..0.95, sizes in prop::collection::vec(1usize..40, 1..5)) {
        let mut cfg = SimConfig::new(1, 0.0, vec![], seed);
        cfg.n_individuals = sizes.len();
        cfg.n_points = *sizes.iter().max().unwrap();
        let (mut ds, _) = gen_dataset(&cfg).unwrap();
        for (ind, &n) in ds.individuals.iter_mut().zip(&sizes) {
            ind.observations.truncate(n);
        }
        let s = split(&ds, fraction, seed).unwrap();
        for ind in &ds.individuals {
            let train = &s.train.individuals[s.train.individual_index(&ind.id).unwrap()];
            let empty = Vec::new();
            let test = s.test.iter().find(|t| t.id == ind.id).map_or(&empty, |t| &t.observations);
            prop_assert_eq!(train.len() + test.len(), ind.len());
            let mut merged: Vec<_> = train.observations.iter().chain(test).cloned().collect();
            merged.sort_by(|a, b| a.t.total_cmp(&b.t));
            prop_assert_eq!(&merged, &ind.observations);
        }
    }
}

fn run(args: &[&str], config: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_trajgp"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn simulate_fit_predict_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
  "data": "out/dataset.csv",
  "output": "out",
  "simulate": {"n_individuals": 2, "n_points": 300, "sigma2": 1, "phi": 1, "tau2": 1,
               "intercepts": [0.5, -0.5], "slopes": [1.0], "seed": 3,
               "surface": {"degree": 2, "n_basis": 4, "scale": 0.5}},
  "model": {"intercept": "per_individual", "numeric": ["x1"],
            "spatial_spline": {"basis": {"x": {"lower": 1, "upper": 10, "degree": 2, "n_basis": 4},
                                         "y": {"lower": 1, "upper": 10, "degree": 2, "n_basis": 4}},
                               "penalty": "ridge_like"}},
  "mcmc": {"n_iter": 400, "n_burnin": 200, "seed": 1},
  "split": {"fraction": 0.7, "seed": 2},
  "predict": {"thin": 2},
  "report": {"grid": 5}
}"#,
    )
    .unwrap();
    for cmd in ["simulate", "fit", "predict", "report"] {
        let out = run(&[cmd], &config);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    let metrics: MetricsReport = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&metrics.coverage));
    assert!(metrics.rmspe > 0.0 && metrics.piw > 0.0 && metrics.dic.is_finite());

    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("id,t,x,y,mean,lo,hi\n"));
    assert_eq!(preds.lines().count() - 1, 2 * 90);
    let coefs = std::fs::read_to_string(out.join("coefficients.csv")).unwrap();
    assert_eq!(coefs.lines().filter(|l| l.starts_with("\"spatial[")).count(), 16);
    assert_eq!(std::fs::read_to_string(out.join("surface.csv")).unwrap().lines().count(), 26);
    let chain = std::fs::read_to_string(out.join("chain.csv")).unwrap();
    assert_eq!(chain.lines().count(), 401);
}

#[test]
fn report_on_a_single_draw() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["intercept".to_string(), "x1".to_string()];
    let mut w = ChainWriter::create(&dir.path().join("chain.csv"), &names).unwrap();
    w.write(&draw(4, 2)).unwrap();
    drop(w);
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"output": ".", "mcmc": {"n_iter": 1, "n_burnin": 0}}"#).unwrap();
    let out = run(&["report"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("coefficients.csv")).unwrap();
    let d = draw(4, 2);
    let expect = [("intercept", d.psi[0]), ("x1", d.psi[1]), ("sigma2", d.sigma2), ("tau2", d.tau2)];
    for (name, v) in expect {
        let line = text.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        let vals: Vec<f64> = line.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        assert_eq!(vals, vec![v, v, v], "{name}");
    }
}

#[test]
fn failures_report_json_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");

    std::fs::write(&config, r#"{"bogus": 1}"#).unwrap();
    let out = run(&["fit"], &config);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    std::fs::write(dir.path().join("d.csv"), "id,timestamp,outcome\na,2020-01-06T08:00:00+00:00,zz\n").unwrap();
    std::fs::write(&config, r#"{"data": "d.csv", "output": "o"}"#).unwrap();
    let out = run(&["fit"], &config);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("line 2"));
}
