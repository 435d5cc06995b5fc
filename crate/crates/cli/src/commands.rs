use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use trajgp::design::{Individual, TrajectoryDataset};
use trajgp::predict::{
    dic, metrics, predict, spatial_surface, summarize, summarize_param, surface_grid, PredictionRequest, Summary,
};
use trajgp::sampler::{CollapsedSampler, ModelData, Param, PosteriorChain};
use trajgp::simulate::gen_dataset;

use crate::chainfile::{read_chain, ChainWriter};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::gps::read_gps;
use crate::ingest::{read_dataset, write_dataset};
use crate::split::split;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub coverage: f64,
    pub rmspe: f64,
    pub rel_rmspe: f64,
    pub piw: f64,
    pub dic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_individuals: usize,
    pub n_obs: usize,
    pub n_iter: usize,
    pub n_burnin: usize,
    pub acceptance_rate: f64,
    pub dic: f64,
    pub seconds: f64,
}

fn out_dir(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| CliError::Data(e.to_string()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let sim = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("`simulate` section is required".into()))?;
    let dir = out_dir(cfg)?;
    let (ds, truth) = gen_dataset(sim)?;
    write_dataset(&ds, &dir.join("dataset.csv"))?;
    write_json(&truth, &dir.join("truth.json"))?;
    log::info!("simulated {} rows for {} individuals", ds.n_obs(), ds.n_individuals());
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let path = cfg.data.as_ref().ok_or_else(|| CliError::Config("`data` is required".into()))?;
    let gps = cfg.gps.as_deref().map(read_gps).transpose()?;
    read_dataset(path, &cfg.model, &cfg.ingest, gps.as_ref())
}

/// Training data and held-out rows; without a split the test set is empty.
pub fn partition(cfg: &RunConfig, ds: TrajectoryDataset) -> Result<(TrajectoryDataset, Vec<Individual>)> {
    match &cfg.split {
        Some(s) => {
            let parts = split(&ds, s.fraction, s.seed)?;
            Ok((parts.train, parts.test))
        }
        None => Ok((ds, Vec::new())),
    }
}

pub fn fit(cfg: &RunConfig) -> Result<FitSummary> {
    let dir = out_dir(cfg)?;
    let (train, _) = partition(cfg, load_dataset(cfg)?)?;
    let start = Instant::now();
    let mut sampler = CollapsedSampler::new(&train, &cfg.model, &cfg.mcmc)?;
    let mut chain_out = ChainWriter::create(&cfg.chain_path(), sampler.names())?;
    let acc_path = dir.join("acceptance.csv");
    let mut acc_out = csv_writer(&acc_path)?;
    acc_out.write_record(["iteration", "accepted", "running_rate"])?;

    let mut draws = Vec::with_capacity(cfg.mcmc.n_iter);
    let mut accepted = 0usize;
    for i in 0..cfg.mcmc.n_iter {
        let d = sampler.step()?;
        chain_out.write(&d)?;
        accepted += usize::from(d.accepted);
        let rate = accepted as f64 / (i + 1) as f64;
        acc_out.write_record([i.to_string(), u8::from(d.accepted).to_string(), rate.to_string()])?;
        if (i + 1) % 1000 == 0 {
            log::info!("iteration {}: acceptance {rate:.3}", i + 1);
        }
        draws.push(d);
    }
    acc_out.flush().map_err(|e| CliError::io(&acc_path, e))?;

    let chain = PosteriorChain { names: sampler.names().to_vec(), n_burnin: cfg.mcmc.n_burnin, draws };
    let summary = FitSummary {
        n_individuals: train.n_individuals(),
        n_obs: train.n_obs(),
        n_iter: cfg.mcmc.n_iter,
        n_burnin: cfg.mcmc.n_burnin,
        acceptance_rate: chain.retained_acceptance_rate(),
        dic: if chain.retained().is_empty() { f64::NAN } else { dic(&chain, sampler.model_data())? },
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&summary, &dir.join("fit.json"))?;
    Ok(summary)
}

fn check_names(chain: &PosteriorChain, data: &ModelData) -> Result<()> {
    if chain.names != data.design().names {
        return Err(CliError::Config("chain columns do not match the configured model".into()));
    }
    Ok(())
}

pub fn predict_cmd(cfg: &RunConfig) -> Result<MetricsReport> {
    let dir = out_dir(cfg)?;
    let (train, test) = partition(cfg, load_dataset(cfg)?)?;
    let chain = read_chain(&cfg.chain_path(), cfg.mcmc.n_burnin)?;
    let data = ModelData::new(&train, &cfg.model)?;
    check_names(&chain, &data)?;

    let targets: &[Individual] = if test.is_empty() { &train.individuals } else { &test };
    let requests: Vec<PredictionRequest> = targets
        .iter()
        .map(|ind| PredictionRequest { individual: ind.id.clone(), points: ind.observations.clone() })
        .collect();
    let results = predict(&chain, &requests, &train, &cfg.model, &cfg.predict)?;

    let path = dir.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["id", "t", "x", "y", "mean", "lo", "hi"])?;
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (req, res) in requests.iter().zip(&results) {
        for (obs, p) in req.points.iter().zip(&res.points) {
            let (x, y) = obs.position.map_or((String::new(), String::new()), |q| (q[0].to_string(), q[1].to_string()));
            w.write_record([
                res.individual.clone(),
                p.t.to_string(),
                x,
                y,
                p.mean.to_string(),
                p.lower.to_string(),
                p.upper.to_string(),
            ])?;
            predicted.push(*p);
            truth.push(obs.outcome);
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let outcomes = train.outcomes();
    let train_mean = outcomes.iter().sum::<f64>() / outcomes.len() as f64;
    let m = metrics(&predicted, &truth, train_mean)?;
    let report = MetricsReport { coverage: m.coverage, rmspe: m.rmspe, rel_rmspe: m.rel_rmspe, piw: m.piw, dic: dic(&chain, &data)? };
    write_json(&report, &dir.join("metrics.json"))?;
    Ok(report)
}

fn write_summary(w: &mut csv::Writer<BufWriter<File>>, name: &str, s: Summary) -> Result<()> {
    w.write_record([name.to_string(), s.mean.to_string(), s.lower.to_string(), s.upper.to_string()])?;
    Ok(())
}

/// Writes `coefficients.csv` and, for spatial models, `surface.csv`.
pub fn report(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let chain = read_chain(&cfg.chain_path(), cfg.mcmc.n_burnin)?;
    if chain.retained().is_empty() {
        return Err(CliError::Data(format!(
            "chain holds {} rows, none after the burn-in of {}",
            chain.draws.len(),
            cfg.mcmc.n_burnin
        )));
    }
    let level = cfg.report.level;
    let path = dir.join("coefficients.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["name", "mean", "lower", "upper"])?;
    for (j, name) in chain.names.iter().enumerate() {
        write_summary(&mut w, name, summarize_param(&chain, Param::Psi(j), level))?;
    }
    for (name, p) in [("sigma2", Param::Sigma2), ("phi", Param::Phi), ("tau2", Param::Tau2)] {
        write_summary(&mut w, name, summarize_param(&chain, p, level))?;
    }
    let lambdas: Vec<f64> = chain.retained().iter().filter_map(|d| d.lambda).collect();
    if !lambdas.is_empty() {
        write_summary(&mut w, "lambda", summarize(&lambdas, level))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    if let Some(spatial) = &cfg.model.spatial_spline {
        let offset = chain
            .names
            .iter()
            .position(|n| n.starts_with("spatial["))
            .ok_or_else(|| CliError::Config("model has a spatial spline but the chain has no spatial columns".into()))?;
        let grid = surface_grid(&spatial.basis, cfg.report.grid);
        let summaries = spatial_surface(&chain, &spatial.basis, offset, &grid, level)?;
        let path = dir.join("surface.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["x", "y", "mean", "lower", "upper", "width"])?;
        for (pt, s) in grid.iter().zip(summaries) {
            w.write_record([pt[0], pt[1], s.mean, s.lower, s.upper, s.upper - s.lower].map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
