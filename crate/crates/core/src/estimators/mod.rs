//! Point estimators of the target-population average treatment effect.

mod identification;
mod kallus;
mod nested;
mod observational;

pub use identification::{regression_functional, reweighting_functional, DiscretePopulation};
pub use kallus::{kallus_deconfound, observational_cate, CateModel, CateProvenance};
pub use nested::{estimate_nested, NestedMethod, NestedTarget};
pub use observational::{aipw_observational, fit_observational_propensity, ipw_observational};

use serde::Serialize;

use crate::data::CombinedDataset;
use crate::error::{Error, Result};
use crate::nuisance::{fit_ols, Arm, LinearModelFit};
use crate::weights::{StrataAssignment, WeightKind, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Warning {
    /// Fitted propensities outside [1e-3, 1 − 1e-3].
    ExtremePropensity { count: usize },
    /// An outcome regression needed the ridge fallback.
    RankDeficientOutcomeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteEstimate {
    pub value: f64,
    pub estimator: String,
    pub normalized: bool,
    /// Nuisance models used, by name.
    pub models: Vec<&'static str>,
    pub warnings: Vec<Warning>,
}

impl AteEstimate {
    fn new(value: f64, estimator: impl Into<String>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidData("estimate is not finite".into()));
        }
        Ok(Self {
            value,
            estimator: estimator.into(),
            normalized: false,
            models: Vec::new(),
            warnings: Vec::new(),
        })
    }

    fn normalized(mut self, yes: bool) -> Self {
        self.normalized = yes;
        self
    }

    fn using(mut self, models: &[&'static str]) -> Self {
        self.models.extend_from_slice(models);
        self
    }

    fn warn(mut self, w: Option<Warning>) -> Self {
        self.warnings.extend(w);
        self
    }
}

/// Arm-wise outcome regressions μ̂₁ and μ̂₀.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeModels {
    pub treated: LinearModelFit,
    pub control: LinearModelFit,
}

impl OutcomeModels {
    pub fn mu1(&self, x: &[f64]) -> f64 {
        self.treated.predict(x)
    }

    pub fn mu0(&self, x: &[f64]) -> f64 {
        self.control.predict(x)
    }

    pub fn contrast(&self, x: &[f64]) -> f64 {
        self.mu1(x) - self.mu0(x)
    }

    fn warning(&self) -> Option<Warning> {
        (self.treated.rank_deficient || self.control.rank_deficient)
            .then_some(Warning::RankDeficientOutcomeModel)
    }
}

/// OLS of Y on X separately in each arm over `rows` (rows lacking A or Y
/// are skipped).
pub fn fit_outcome_models_on(ds: &CombinedDataset, rows: &[usize]) -> Result<OutcomeModels> {
    let fit = |arm: u8| -> Result<LinearModelFit> {
        let sel: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| ds.treatment(i) == Some(arm) && ds.outcome(i).is_some())
            .collect();
        if sel.is_empty() {
            return Err(Error::EmptyArm(if arm == 1 {
                "treated"
            } else {
                "control"
            }));
        }
        let y: Vec<f64> = sel.iter().map(|&i| ds.y(i)).collect();
        let tag = if arm == 1 { Arm::Treated } else { Arm::Control };
        Ok(fit_ols(&ds.design_rows(&sel), &y)?.with_arm(tag))
    };
    Ok(OutcomeModels {
        treated: fit(1)?,
        control: fit(0)?,
    })
}

/// Outcome models fitted on the trial arms.
pub fn fit_outcome_models(ds: &CombinedDataset) -> Result<OutcomeModels> {
    fit_outcome_models_on(ds, ds.trial_rows())
}

/// A/e₁ − (1−A)/(1−e₁) for a trial row.
fn horvitz_sign(ds: &CombinedDataset, row: usize) -> f64 {
    let e = ds.e1(row);
    let a = ds.a(row);
    a / e - (1.0 - a) / (1.0 - e)
}

fn check_alpha(ds: &CombinedDataset, w: &WeightVector, kind: WeightKind) -> Result<()> {
    if w.len() != ds.n() || w.kind() != kind {
        return Err(Error::InvalidData(format!(
            "expected {kind:?} weights for {} trial units, got {:?} × {}",
            ds.n(),
            w.kind(),
            w.len()
        )));
    }
    Ok(())
}

pub fn difference_in_means(ds: &CombinedDataset) -> Result<AteEstimate> {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for &i in ds.trial_rows() {
        if ds.a(i) == 1.0 {
            s1 += ds.y(i);
            n1 += 1;
        } else {
            s0 += ds.y(i);
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm("control"));
    }
    AteEstimate::new(s1 / n1 as f64 - s0 / n0 as f64, "dm")
}

/// Inverse probability of sampling weighting with odds α̂.
///
/// Unnormalized: `(1/n) Σ (n/m) Y/α̂ (A/e₁ − (1−A)/(1−e₁))`. Normalized:
/// Hájek ratio within each arm with weights `1/(α̂ e₁)` and `1/(α̂ (1−e₁))`.
pub fn ipsw(ds: &CombinedDataset, alpha: &WeightVector, normalized: bool) -> Result<AteEstimate> {
    check_alpha(ds, alpha, WeightKind::OddsAlpha)?;
    let n = ds.n() as f64;
    let m = ds.m() as f64;
    let value = if normalized {
        let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
        for (&i, &a) in ds.trial_rows().iter().zip(alpha.values()) {
            let e = ds.e1(i);
            if ds.a(i) == 1.0 {
                let w = 1.0 / (a * e);
                num1 += w * ds.y(i);
                den1 += w;
            } else {
                let w = 1.0 / (a * (1.0 - e));
                num0 += w * ds.y(i);
                den0 += w;
            }
        }
        if den1 <= 0.0 {
            return Err(Error::ZeroWeightSum("treated"));
        }
        if den0 <= 0.0 {
            return Err(Error::ZeroWeightSum("control"));
        }
        num1 / den1 - num0 / den0
    } else {
        let total: f64 = ds
            .trial_rows()
            .iter()
            .zip(alpha.values())
            .map(|(&i, &a)| (n / m) * ds.y(i) / a * horvitz_sign(ds, i))
            .sum();
        total / n
    };
    let id = if normalized { "ipsw_norm" } else { "ipsw" };
    Ok(AteEstimate::new(value, id)?
        .normalized(normalized)
        .using(&["selection"]))
}

/// `Σ_l (m_l/m)(Ȳ₁,l − Ȳ₀,l)`.
pub fn stratification_estimate(
    ds: &CombinedDataset,
    strata: &StrataAssignment,
) -> Result<AteEstimate> {
    if strata.trial.len() != ds.n() || strata.target.len() != ds.m() {
        return Err(Error::InvalidData("strata do not match dataset".into()));
    }
    strata.check(ds)?;
    let l = strata.l;
    let mut sum = vec![[0.0f64; 2]; l];
    let mut cnt = vec![[0usize; 2]; l];
    for (&i, &s) in ds.trial_rows().iter().zip(&strata.trial) {
        let arm = ds.a(i) as usize;
        sum[s - 1][arm] += ds.y(i);
        cnt[s - 1][arm] += 1;
    }
    let mut ml = vec![0usize; l];
    for &s in &strata.target {
        ml[s - 1] += 1;
    }
    let m = ds.m() as f64;
    let value = (0..l)
        .map(|s| {
            let diff = sum[s][1] / cnt[s][1] as f64 - sum[s][0] / cnt[s][0] as f64;
            ml[s] as f64 / m * diff
        })
        .sum();
    Ok(AteEstimate::new(value, format!("strat{l}"))?.using(&["selection"]))
}

/// Averages μ̂₁ − μ̂₀ (fitted on the trial) over the observational rows.
pub fn g_formula(ds: &CombinedDataset) -> Result<AteEstimate> {
    g_formula_with(ds, &fit_outcome_models(ds)?)
}

pub fn g_formula_with(ds: &CombinedDataset, models: &OutcomeModels) -> Result<AteEstimate> {
    let value = ds
        .target_rows()
        .iter()
        .map(|&i| models.contrast(ds.x(i)))
        .sum::<f64>()
        / ds.m() as f64;
    Ok(AteEstimate::new(value, "gformula")?
        .using(&["outcome"])
        .warn(models.warning()))
}

/// `Σ ω_i Y_i (A_i/e₁ − (1−A_i)/(1−e₁))` with calibration weights ω.
pub fn calibration_weighting(ds: &CombinedDataset, cw: &WeightVector) -> Result<AteEstimate> {
    check_alpha(ds, cw, WeightKind::Calibration)?;
    let value = ds
        .trial_rows()
        .iter()
        .zip(cw.values())
        .map(|(&i, &w)| w * ds.y(i) * horvitz_sign(ds, i))
        .sum();
    Ok(AteEstimate::new(value, "cw")?
        .normalized(true)
        .using(&["calibration"]))
}

/// Trial augmentation term `Σ w_i (A(Y−μ̂₁)/e₁ − (1−A)(Y−μ̂₀)/(1−e₁))`.
fn augmentation(
    ds: &CombinedDataset,
    weights: impl Iterator<Item = f64>,
    models: &OutcomeModels,
) -> f64 {
    ds.trial_rows()
        .iter()
        .zip(weights)
        .map(|(&i, w)| {
            let x = ds.x(i);
            let e = ds.e1(i);
            let a = ds.a(i);
            let y = ds.y(i);
            w * (a * (y - models.mu1(x)) / e - (1.0 - a) * (y - models.mu0(x)) / (1.0 - e))
        })
        .sum()
}

/// Augmented IPSW: trial residuals weighted by `n/(m α̂)` (averaged over n)
/// plus the g-formula term.
pub fn aipsw(
    ds: &CombinedDataset,
    alpha: &WeightVector,
    models: &OutcomeModels,
) -> Result<AteEstimate> {
    check_alpha(ds, alpha, WeightKind::OddsAlpha)?;
    let n = ds.n() as f64;
    let m = ds.m() as f64;
    let trial = augmentation(ds, alpha.values().iter().map(|a| n / (m * a)), models) / n;
    let g = g_formula_with(ds, models)?.value;
    Ok(AteEstimate::new(trial + g, "aipsw")?
        .using(&["selection", "outcome"])
        .warn(models.warning()))
}

/// Augmented calibration weighting: as [`aipsw`] with ω replacing n/(m α̂).
pub fn acw(ds: &CombinedDataset, cw: &WeightVector, models: &OutcomeModels) -> Result<AteEstimate> {
    check_alpha(ds, cw, WeightKind::Calibration)?;
    let trial = augmentation(ds, cw.values().iter().copied(), models);
    let g = g_formula_with(ds, models)?.value;
    Ok(AteEstimate::new(trial + g, "acw")?
        .normalized(true)
        .using(&["calibration", "outcome"])
        .warn(models.warning()))
}
