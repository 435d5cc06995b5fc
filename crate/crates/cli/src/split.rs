//! Train/test splitting, stratified by individual.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajgp::design::{Individual, TrajectoryDataset};

use crate::error::{CliError, Result};

/// Training set plus the held-out rows of each individual that has any.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: TrajectoryDataset,
    pub test: Vec<Individual>,
}

/// Keeps `ceil(fraction · T_k)` uniformly chosen rows of every individual for
/// training; individuals with fewer than two rows go to training whole.
pub fn split(ds: &TrajectoryDataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(ds.individuals.len());
    let mut test = Vec::new();
    for ind in &ds.individuals {
        let n = ind.len();
        if n < 2 {
            log::warn!("individual {} has {n} row(s); all kept for training", ind.id);
            train.push(ind.clone());
            continue;
        }
        let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let mut keep = vec![false; n];
        for i in sample(&mut rng, n, k) {
            keep[i] = true;
        }
        let (a, b): (Vec<_>, Vec<_>) = ind.observations.iter().cloned().zip(keep).partition(|(_, k)| *k);
        train.push(Individual { id: ind.id.clone(), observations: a.into_iter().map(|(o, _)| o).collect() });
        if !b.is_empty() {
            test.push(Individual { id: ind.id.clone(), observations: b.into_iter().map(|(o, _)| o).collect() });
        }
    }
    let train = TrajectoryDataset::new(ds.covariate_names.clone(), train, ds.origin)?;
    Ok(Split { train, test })
}
