//! Estimator registry and the Monte-Carlo simulation harness.

use std::cell::OnceCell;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{CombinedDataset, Design};
use crate::dgp::{generate, trial_ate, true_ate, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimators::{
    acw, aipsw, calibration_weighting, difference_in_means, estimate_nested, fit_outcome_models,
    g_formula_with, ipsw, stratification_estimate, AteEstimate, NestedMethod, NestedTarget,
    OutcomeModels,
};
use crate::nuisance::MomentSpec;
use crate::weights::{assign_strata, calibration_weights, estimate_alpha, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorId {
    Dm,
    Ipsw,
    IpswNorm,
    Strat(usize),
    GFormula,
    Cw,
    Aipsw,
    Acw,
    /// IPSW with the selection model restricted to X1.
    IpswX1,
    /// IPSW with the selection model on every covariate but X1.
    IpswNoX1,
    Nested(NestedMethod),
}

pub const DEFAULT_STRATA: usize = 10;

impl EstimatorId {
    pub fn id(&self) -> String {
        match self {
            EstimatorId::Dm => "dm".into(),
            EstimatorId::Ipsw => "ipsw".into(),
            EstimatorId::IpswNorm => "ipsw_norm".into(),
            EstimatorId::Strat(l) => format!("strat{l}"),
            EstimatorId::GFormula => "gformula".into(),
            EstimatorId::Cw => "cw".into(),
            EstimatorId::Aipsw => "aipsw".into(),
            EstimatorId::Acw => "acw".into(),
            EstimatorId::IpswX1 => "ipsw_x1".into(),
            EstimatorId::IpswNoX1 => "ipsw_no_x1".into(),
            EstimatorId::Nested(m) => m.id().into(),
        }
    }

    /// Parses a comma-separated list such as `dm,ipsw,strat10`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }

    /// The standard non-nested line-up.
    pub fn standard() -> Vec<Self> {
        vec![
            EstimatorId::Dm,
            EstimatorId::Ipsw,
            EstimatorId::IpswNorm,
            EstimatorId::Strat(DEFAULT_STRATA),
            EstimatorId::GFormula,
            EstimatorId::Cw,
            EstimatorId::Aipsw,
            EstimatorId::Acw,
        ]
    }

    /// Routes the generic weighting and regression estimators to their
    /// nested-design counterparts.
    pub fn for_design(self, design: Design) -> Self {
        match (design, self) {
            (Design::Nested, EstimatorId::Ipsw) => EstimatorId::Nested(NestedMethod::Ipsw),
            (Design::Nested, EstimatorId::IpswNorm) => EstimatorId::Nested(NestedMethod::IpswNorm),
            (Design::Nested, EstimatorId::GFormula) => EstimatorId::Nested(NestedMethod::GFormula),
            (Design::Nested, EstimatorId::Aipsw) => EstimatorId::Nested(NestedMethod::Aipsw),
            (_, id) => id,
        }
    }

    pub fn nested_all() -> Vec<Self> {
        let mut v = vec![EstimatorId::Dm];
        v.extend(NestedMethod::ALL.into_iter().map(EstimatorId::Nested));
        v
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let id = match s {
            "dm" => EstimatorId::Dm,
            "ipsw" => EstimatorId::Ipsw,
            "ipsw_norm" => EstimatorId::IpswNorm,
            "strat" => EstimatorId::Strat(DEFAULT_STRATA),
            "gformula" => EstimatorId::GFormula,
            "cw" => EstimatorId::Cw,
            "aipsw" => EstimatorId::Aipsw,
            "acw" => EstimatorId::Acw,
            "ipsw_x1" => EstimatorId::IpswX1,
            "ipsw_no_x1" => EstimatorId::IpswNoX1,
            other => {
                if let Some(l) = other
                    .strip_prefix("strat")
                    .and_then(|l| l.parse::<usize>().ok())
                {
                    if l < 2 {
                        return Err(Error::UnknownEstimator(s.to_string()));
                    }
                    EstimatorId::Strat(l)
                } else if other.starts_with("nested_") || other.starts_with("eff_") {
                    EstimatorId::Nested(other.parse()?)
                } else {
                    return Err(Error::UnknownEstimator(s.to_string()));
                }
            }
        };
        Ok(id)
    }
}

/// Shares fitted nuisances between estimators evaluated on one dataset.
pub struct Pipeline<'a> {
    ds: &'a CombinedDataset,
    g: MomentSpec,
    nested_target: NestedTarget,
    alpha: OnceCell<Result<WeightVector>>,
    cw: OnceCell<Result<WeightVector>>,
    models: OnceCell<Result<OutcomeModels>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(ds: &'a CombinedDataset) -> Self {
        Self {
            ds,
            g: MomentSpec::first(),
            nested_target: NestedTarget::Cohort,
            alpha: OnceCell::new(),
            cw: OnceCell::new(),
            models: OnceCell::new(),
        }
    }

    pub fn moments(mut self, g: MomentSpec) -> Self {
        self.g = g;
        self
    }

    pub fn nested_target(mut self, t: NestedTarget) -> Self {
        self.nested_target = t;
        self
    }

    fn alpha(&self) -> Result<&WeightVector> {
        self.alpha
            .get_or_init(|| estimate_alpha(self.ds))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn cw(&self) -> Result<&WeightVector> {
        self.cw
            .get_or_init(|| calibration_weights(self.ds, &self.g))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn models(&self) -> Result<&OutcomeModels> {
        self.models
            .get_or_init(|| fit_outcome_models(self.ds))
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn estimate(&self, id: EstimatorId) -> Result<AteEstimate> {
        let ds = self.ds;
        match id {
            EstimatorId::Dm => difference_in_means(ds),
            EstimatorId::Ipsw => ipsw(ds, self.alpha()?, false),
            EstimatorId::IpswNorm => ipsw(ds, self.alpha()?, true),
            EstimatorId::Strat(l) => {
                let model = self
                    .alpha()?
                    .model()
                    .expect("odds weights keep their model");
                stratification_estimate(ds, &assign_strata(model, ds, l)?)
            }
            EstimatorId::GFormula => g_formula_with(ds, self.models()?),
            EstimatorId::Cw => calibration_weighting(ds, self.cw()?),
            EstimatorId::Aipsw => aipsw(ds, self.alpha()?, self.models()?),
            EstimatorId::Acw => acw(ds, self.cw()?, self.models()?),
            EstimatorId::IpswX1 | EstimatorId::IpswNoX1 => {
                let cols: Vec<usize> = if id == EstimatorId::IpswX1 {
                    vec![0]
                } else {
                    (1..ds.p()).collect()
                };
                let sub = ds.project_covariates(&cols)?;
                let mut est = ipsw(&sub, &estimate_alpha(&sub)?, false)?;
                est.estimator = id.id();
                Ok(est)
            }
            EstimatorId::Nested(m) => estimate_nested(ds, m, self.nested_target),
        }
    }
}

/// Evaluates one estimator on `ds`, fitting every nuisance from scratch.
pub fn run_estimator(ds: &CombinedDataset, id: EstimatorId, g: &MomentSpec) -> Result<AteEstimate> {
    Pipeline::new(ds).moments(g.clone()).estimate(id)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorId>,
    pub moments: MomentSpec,
    /// Overrides the scenario's default superpopulation size.
    pub superpopulation: Option<usize>,
    /// Overrides the default observational sample size.
    pub m: Option<usize>,
}

impl BenchConfig {
    pub fn new(scenario: Scenario, reps: usize, seed: u64, estimators: Vec<EstimatorId>) -> Self {
        Self {
            scenario,
            reps,
            seed,
            estimators,
            moments: MomentSpec::first(),
            superpopulation: None,
            m: None,
        }
    }

    fn scenario_config(&self, replicate: u64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(self.scenario, self.seed).replicate(replicate);
        if let Some(s) = self.superpopulation {
            cfg.superpopulation = s;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub estimator: String,
    pub mean: f64,
    /// mean − truth.
    pub bias: f64,
    pub sd: f64,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
    pub scenario: String,
    pub seed: u64,
    /// Quantity the estimator targets: τ, or τ₁ for `eff_tau1`.
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub seed: u64,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, estimator: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

/// Target of an estimator under a scenario.
pub fn truth_for(scenario: Scenario, id: EstimatorId) -> Result<f64> {
    match id {
        EstimatorId::Nested(NestedMethod::EffTau1) => trial_ate(scenario),
        _ => Ok(true_ate(scenario)),
    }
}

/// Runs `reps` independent replications (in parallel) and summarises each
/// estimator. Replicate r uses substreams keyed by (seed, r), so results do
/// not depend on scheduling.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidData(
            "at least one replication is required".into(),
        ));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidData("no estimators requested".into()));
    }
    let mut ids = cfg.estimators.clone();
    ids.sort_by_key(EstimatorId::id);
    ids.dedup();
    let truths = ids
        .iter()
        .map(|&id| truth_for(cfg.scenario, id))
        .collect::<Result<Vec<_>>>()?;

    let per_rep: Vec<Vec<Option<f64>>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<Option<f64>>> {
            let ds = generate(&cfg.scenario_config(r))?;
            let pipe = Pipeline::new(&ds).moments(cfg.moments.clone());
            Ok(ids
                .iter()
                .map(|&id| pipe.estimate(id).ok().map(|e| e.value))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ids
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(k, (id, &truth))| {
            let vals: Vec<f64> = per_rep.iter().filter_map(|r| r[k]).collect();
            let count = vals.len();
            let mean = if count > 0 {
                vals.iter().sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let sd = if count > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            BenchRow {
                estimator: id.id(),
                mean,
                bias: mean - truth,
                sd,
                reps: count,
                failures: cfg.reps - count,
                scenario: cfg.scenario.name().into(),
                seed: cfg.seed,
                truth,
            }
        })
        .collect();
    Ok(BenchReport {
        scenario: cfg.scenario.name().into(),
        seed: cfg.seed,
        reps: cfg.reps,
        rows,
    })
}
