//! Dataset model, outcome transforms and fixed-effect design assembly.
//!
//! The combined design `X* = [X, B_H, B_S]` has a fixed column order:
//! intercept(s), categorical dummies (baseline level dropped), numeric
//! covariates, hour-of-day spline columns, then spatial tensor-spline columns.
//! Partition-of-unity spline blocks are collinear with the intercepts; the
//! shrinkage prior on the spline coefficients is what identifies them.

use std::collections::HashMap;
use std::ops::Range;

use chrono::{DateTime, FixedOffset, Timelike};
use serde::{Deserialize, Serialize};

use crate::splines::{build_penalty, PenaltyKind, PenaltyMatrix, SplineBasisSpec1D, TensorBasisSpec};
use crate::{Error, Result};

/// Daily awake window, in clock hours `[start, end)`.
pub const AWAKE_WINDOW: (f64, f64) = (7.0, 23.0);

/// Slope of the MAG-to-MET line for 10-second epochs (`0.000863 × 6`).
pub const MET_SLOPE: f64 = 0.000863 * 6.0;
pub const MET_INTERCEPT: f64 = 0.668876;
/// Lower MAG bounds of the moderate, hard and very hard intensity classes.
pub const MAG_CUT_POINTS: [f64; 3] = [493.0, 1029.0, 1608.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Num(f64),
    Cat(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Seconds from the dataset origin.
    pub t: f64,
    /// Wall-clock hour of day, when known.
    pub hour: Option<f64>,
    pub position: Option<[f64; 2]>,
    /// Aligned with [`TrajectoryDataset::covariate_names`].
    pub covariates: Vec<CovariateValue>,
    pub outcome: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl Individual {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.t).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.outcome).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub covariate_names: Vec<String>,
    pub individuals: Vec<Individual>,
    /// Wall-clock instant of `t = 0`.
    pub origin: Option<DateTime<FixedOffset>>,
}

impl TrajectoryDataset {
    pub fn new(
        covariate_names: Vec<String>,
        individuals: Vec<Individual>,
        origin: Option<DateTime<FixedOffset>>,
    ) -> Result<Self> {
        let ds = TrajectoryDataset { covariate_names, individuals, origin };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.individuals.is_empty() {
            return Err(Error::Data("dataset has no individuals".into()));
        }
        let mut seen = HashMap::new();
        for ind in &self.individuals {
            if seen.insert(ind.id.as_str(), ()).is_some() {
                return Err(Error::Data(format!("individual {} appears twice", ind.id)));
            }
            for (i, w) in ind.observations.windows(2).enumerate() {
                if !(w[1].t > w[0].t) {
                    return Err(Error::Data(format!(
                        "individual {}: times not strictly increasing at row {}",
                        ind.id,
                        i + 1
                    )));
                }
            }
            for o in &ind.observations {
                if !o.t.is_finite() || !o.outcome.is_finite() {
                    return Err(Error::Data(format!("individual {}: non-finite time or outcome", ind.id)));
                }
                if o.covariates.len() != self.covariate_names.len() {
                    return Err(Error::Dimension {
                        expected: self.covariate_names.len(),
                        got: o.covariates.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `K`.
    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    /// `n = Σ T_k`.
    pub fn n_obs(&self) -> usize {
        self.individuals.iter().map(Individual::len).sum()
    }

    pub fn individual_index(&self, id: &str) -> Option<usize> {
        self.individuals.iter().position(|i| i.id == id)
    }

    /// All outcomes in dataset order.
    pub fn outcomes(&self) -> Vec<f64> {
        self.individuals.iter().flat_map(|i| i.observations.iter().map(|o| o.outcome)).collect()
    }
}

/// Euclidean norm of the three axis activity counts.
pub fn mag(x: f64, y: f64, z: f64) -> Result<f64> {
    for c in [x, y, z] {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::Data(format!("activity counts must be finite and non-negative, got {c}")));
        }
    }
    Ok((x * x + y * y + z * z).sqrt())
}

/// Log-MAG outcome. Zero-MAG epochs are inactive and must be filtered before.
pub fn log_mag(mag: f64) -> Result<f64> {
    if !(mag > 0.0) {
        return Err(Error::Data(format!("log-MAG needs MAG > 0, got {mag}")));
    }
    Ok(mag.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityClass {
    SedentaryOrLight,
    Moderate,
    Hard,
    VeryHard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetEstimate {
    pub met: f64,
    pub class: IntensityClass,
}

/// MET estimate of a 10-second-epoch MAG and its intensity class.
///
/// The class uses the published MAG cut-points verbatim. They are not the exact
/// preimages of MET 3/6/9 under the linear map (MET 3 maps back to ≈ 450.2).
pub fn mag_to_met(mag: f64) -> MetEstimate {
    let class = if mag < MAG_CUT_POINTS[0] {
        IntensityClass::SedentaryOrLight
    } else if mag < MAG_CUT_POINTS[1] {
        IntensityClass::Moderate
    } else if mag < MAG_CUT_POINTS[2] {
        IntensityClass::Hard
    } else {
        IntensityClass::VeryHard
    };
    MetEstimate { met: MET_SLOPE * mag + MET_INTERCEPT, class }
}

/// Fractional wall-clock hour of a timestamp in its own UTC offset.
pub fn clock_hour(ts: &DateTime<FixedOffset>) -> f64 {
    let t = ts.time();
    t.hour() as f64 + t.minute() as f64 / 60.0 + (t.second() as f64 + t.nanosecond() as f64 * 1e-9) / 3600.0
}

/// Clock hour restricted to the awake window; anything else should have been
/// dropped at ingestion.
pub fn hour_of_day(ts: &DateTime<FixedOffset>) -> Result<f64> {
    let h = clock_hour(ts);
    if !(h >= AWAKE_WINDOW.0 && h < AWAKE_WINDOW.1) {
        return Err(Error::Domain(format!("hour {h} outside the awake window [7, 23)")));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptScheme {
    None,
    #[default]
    Common,
    PerIndividual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalTerm {
    pub name: String,
    pub levels: Vec<String>,
    /// Defaults to the first declared level.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl CategoricalTerm {
    pub fn baseline(&self) -> &str {
        self.baseline.as_deref().unwrap_or_else(|| self.levels.first().map(String::as_str).unwrap_or(""))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialSplineSpec {
    pub basis: TensorBasisSpec,
    pub penalty: PenaltyKind,
}

impl SpatialSplineSpec {
    pub fn penalty_matrix(&self) -> PenaltyMatrix {
        let (jx, jy) = self.basis.grid_dims();
        build_penalty(self.penalty, jx, jy)
    }
}

/// Inverse-gamma `IG(shape, rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Gamma `G(shape, rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGammaPrior {
    /// Log density up to its normalising constant.
    pub fn ln_kernel(&self, x: f64) -> f64 {
        -(self.shape + 1.0) * x.ln() - self.rate / x
    }
}

impl GammaPrior {
    pub fn ln_kernel(&self, x: f64) -> f64 {
        (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    /// Common prior mean of the unpenalised coefficients.
    pub beta_mean: f64,
    /// Common prior variance of the unpenalised coefficients.
    pub beta_variance: f64,
    pub sigma2: InverseGammaPrior,
    pub tau2: InverseGammaPrior,
    pub phi: GammaPrior,
    pub lambda: GammaPrior,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_mean: 0.0,
            beta_variance: 1e6,
            sigma2: InverseGammaPrior { shape: 2.0, rate: 2.0 },
            tau2: InverseGammaPrior { shape: 2.0, rate: 2.0 },
            phi: GammaPrior { shape: 1.0, rate: 1.0 },
            lambda: GammaPrior { shape: 1.0, rate: 1.0 },
        }
    }
}

fn default_neighbors() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub intercept: InterceptScheme,
    #[serde(default)]
    pub categorical: Vec<CategoricalTerm>,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub hour_spline: Option<SplineBasisSpec1D>,
    #[serde(default)]
    pub spatial_spline: Option<SpatialSplineSpec>,
    #[serde(default)]
    pub priors: Priors,
    /// Neighbour budget `m`.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            intercept: InterceptScheme::Common,
            categorical: Vec::new(),
            numeric: Vec::new(),
            hour_spline: None,
            spatial_spline: None,
            priors: Priors::default(),
            neighbors: default_neighbors(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for term in &self.categorical {
            if term.levels.is_empty() {
                return Err(Error::Config(format!("categorical {} declares no levels", term.name)));
            }
            if !term.levels.iter().any(|l| l == term.baseline()) {
                return Err(Error::Config(format!(
                    "baseline {} is not a declared level of {}",
                    term.baseline(),
                    term.name
                )));
            }
        }
        let p = &self.priors;
        let positive = [
            p.beta_variance,
            p.sigma2.shape,
            p.sigma2.rate,
            p.tau2.shape,
            p.tau2.rate,
            p.phi.shape,
            p.phi.rate,
            p.lambda.shape,
            p.lambda.rate,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("prior hyperparameters must be positive and finite".into()));
        }
        if !p.beta_mean.is_finite() {
            return Err(Error::Config("prior mean must be finite".into()));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("neighbour budget m must be at least 1".into()));
        }
        if let Some(h) = &self.hour_spline {
            h.validate()?;
        }
        if let Some(s) = &self.spatial_spline {
            s.basis.x.validate()?;
            s.basis.y.validate()?;
        }
        Ok(())
    }
}

/// Column ranges of the design blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnGroups {
    pub intercepts: Range<usize>,
    pub categorical: Range<usize>,
    pub numeric: Range<usize>,
    pub hour: Range<usize>,
    pub spatial: Range<usize>,
}

enum CovSlot {
    Cat { col: usize, term: usize },
    Num { col: usize },
}

/// Maps observations to design rows for one dataset and model.
pub struct DesignLayout {
    spec: ModelSpec,
    n_individuals: usize,
    slots: Vec<CovSlot>,
    names: Vec<String>,
    groups: ColumnGroups,
}

impl DesignLayout {
    pub fn new(dataset: &TrajectoryDataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let find = |name: &str| {
            dataset
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Data(format!("covariate {name} not present in dataset")))
        };
        let mut names = Vec::new();
        let start = names.len();
        match spec.intercept {
            InterceptScheme::None => {}
            InterceptScheme::Common => names.push("intercept".to_string()),
            InterceptScheme::PerIndividual => {
                names.extend(dataset.individuals.iter().map(|i| format!("intercept[{}]", i.id)))
            }
        }
        let intercepts = start..names.len();

        let mut slots = Vec::new();
        let start = names.len();
        for (t, term) in spec.categorical.iter().enumerate() {
            slots.push(CovSlot::Cat { col: find(&term.name)?, term: t });
            for level in term.levels.iter().filter(|l| l.as_str() != term.baseline()) {
                names.push(format!("{}[{}]", term.name, level));
            }
        }
        let categorical = start..names.len();

        let start = names.len();
        for name in &spec.numeric {
            slots.push(CovSlot::Num { col: find(name)? });
            names.push(name.clone());
        }
        let numeric = start..names.len();

        let start = names.len();
        if let Some(h) = &spec.hour_spline {
            names.extend((0..h.n_basis).map(|j| format!("hour[{j}]")));
        }
        let hour = start..names.len();

        let start = names.len();
        if let Some(s) = &spec.spatial_spline {
            let (jx, jy) = s.basis.grid_dims();
            for a in 0..jx {
                for b in 0..jy {
                    names.push(format!("spatial[{a},{b}]"));
                }
            }
        }
        let spatial = start..names.len();

        Ok(DesignLayout {
            spec: spec.clone(),
            n_individuals: dataset.n_individuals(),
            slots,
            names,
            groups: ColumnGroups { intercepts, categorical, numeric, hour, spatial },
        })
    }

    /// `p*`.
    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &ColumnGroups {
        &self.groups
    }

    /// Writes the design row of `obs` for individual `k` into `out`.
    pub fn fill_row(&self, k: usize, obs: &Observation, out: &mut [f64]) -> Result<()> {
        assert_eq!(out.len(), self.width());
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.spec.intercept {
            InterceptScheme::None => {}
            InterceptScheme::Common => out[0] = 1.0,
            InterceptScheme::PerIndividual => {
                if k >= self.n_individuals {
                    return Err(Error::Data(format!("individual index {k} has no intercept column")));
                }
                out[self.groups.intercepts.start + k] = 1.0;
            }
        }
        let mut cat_col = self.groups.categorical.start;
        let mut num_col = self.groups.numeric.start;
        for slot in &self.slots {
            match *slot {
                CovSlot::Cat { col, term } => {
                    let term = &self.spec.categorical[term];
                    let label = match &obs.covariates[col] {
                        CovariateValue::Cat(s) => s.clone(),
                        CovariateValue::Num(v) => format_level(*v),
                    };
                    let mut found = label == term.baseline();
                    for level in term.levels.iter().filter(|l| l.as_str() != term.baseline()) {
                        if *level == label {
                            out[cat_col] = 1.0;
                            found = true;
                        }
                        cat_col += 1;
                    }
                    if !found {
                        return Err(Error::Data(format!(
                            "unseen level {label} of categorical {}",
                            term.name
                        )));
                    }
                }
                CovSlot::Num { col } => {
                    out[num_col] = match &obs.covariates[col] {
                        CovariateValue::Num(v) if v.is_finite() => *v,
                        other => {
                            return Err(Error::Data(format!(
                                "numeric covariate {} has value {other:?}",
                                self.spec.numeric[num_col - self.groups.numeric.start]
                            )))
                        }
                    };
                    num_col += 1;
                }
            }
        }
        if let Some(h) = &self.spec.hour_spline {
            let hour = obs.hour.ok_or_else(|| Error::Data("hour spline needs a wall-clock hour".into()))?;
            let (first, vals) = h.eval_nonzero(hour)?;
            let base = self.groups.hour.start + first;
            out[base..base + vals.len()].copy_from_slice(&vals);
        }
        if let Some(s) = &self.spec.spatial_spline {
            let [x, y] = obs
                .position
                .ok_or_else(|| Error::Data(format!("observation at t={} has no position", obs.t)))?;
            for (j, v) in s.basis.eval_nonzero(x, y)? {
                out[self.groups.spatial.start + j] = v;
            }
        }
        Ok(())
    }

    /// Design rows for arbitrary observations of individual `k`.
    pub fn rows(&self, k: usize, observations: &[Observation]) -> Result<Vec<f64>> {
        let p = self.width();
        let mut data = vec![0.0; observations.len() * p];
        for (o, row) in observations.iter().zip(data.chunks_mut(p.max(1))) {
            if p > 0 {
                self.fill_row(k, o, row)?;
            }
        }
        Ok(data)
    }
}

fn format_level(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Dense `n × p*` design, row-major, rows in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub data: Vec<f64>,
    pub n_rows: usize,
    pub n_cols: usize,
    pub names: Vec<String>,
    pub groups: ColumnGroups,
    /// Row offsets of the individuals, length `K + 1`.
    pub offsets: Vec<usize>,
}

impl DesignMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Rows of individual `k`.
    pub fn block(&self, k: usize) -> &[f64] {
        &self.data[self.offsets[k] * self.n_cols..self.offsets[k + 1] * self.n_cols]
    }
}

pub fn assemble_design(dataset: &TrajectoryDataset, spec: &ModelSpec) -> Result<DesignMatrix> {
    let layout = DesignLayout::new(dataset, spec)?;
    let p = layout.width();
    let n = dataset.n_obs();
    let mut data = vec![0.0; n * p];
    let mut offsets = Vec::with_capacity(dataset.n_individuals() + 1);
    let mut row = 0usize;
    for (k, ind) in dataset.individuals.iter().enumerate() {
        offsets.push(row);
        for o in &ind.observations {
            if p > 0 {
                layout.fill_row(k, o, &mut data[row * p..(row + 1) * p])?;
            }
            row += 1;
        }
    }
    offsets.push(row);
    Ok(DesignMatrix {
        data,
        n_rows: n,
        n_cols: p,
        names: layout.names,
        groups: layout.groups,
        offsets,
    })
}
