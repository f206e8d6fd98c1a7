//! Classical estimators on the observational sample alone (requires A and Y
//! on observational rows).

use crate::data::CombinedDataset;
use crate::error::{Error, Result};
use crate::nuisance::{fit_logistic, LogisticModelFit};

use super::{AteEstimate, OutcomeModels, Warning};

const EXTREME: f64 = 1e-3;

fn observed_rows(ds: &CombinedDataset) -> Result<&[usize]> {
    let rows = ds.target_rows();
    if let Some(&bad) = rows
        .iter()
        .find(|&&i| ds.treatment(i).is_none() || ds.outcome(i).is_none())
    {
        return Err(Error::MissingTreatmentOutcome { row: bad + 1 });
    }
    Ok(rows)
}

/// Logistic model of A on X within the observational rows.
pub fn fit_observational_propensity(ds: &CombinedDataset) -> Result<LogisticModelFit> {
    let rows = observed_rows(ds)?;
    let labels: Vec<bool> = rows.iter().map(|&i| ds.treatment(i) == Some(1)).collect();
    fit_logistic(&ds.design_rows(rows), &labels)?.require_converged()
}

fn extreme_warning(ps: &[f64]) -> Option<Warning> {
    let count = ps
        .iter()
        .filter(|&&p| !(EXTREME..=1.0 - EXTREME).contains(&p))
        .count();
    (count > 0).then_some(Warning::ExtremePropensity { count })
}

/// `(1/m) Σ [A Y/ê − (1−A) Y/(1−ê)]` over observational rows.
pub fn ipw_observational(
    ds: &CombinedDataset,
    propensity: &LogisticModelFit,
) -> Result<AteEstimate> {
    let rows = observed_rows(ds)?;
    let ps: Vec<f64> = rows
        .iter()
        .map(|&i| propensity.predict_proba(ds.x(i)))
        .collect();
    let total: f64 = rows
        .iter()
        .zip(&ps)
        .map(|(&i, &e)| {
            let a = f64::from(ds.treatment(i).unwrap());
            let y = ds.y(i);
            a * y / e - (1.0 - a) * y / (1.0 - e)
        })
        .sum();
    Ok(AteEstimate::new(total / rows.len() as f64, "ipw_obs")?
        .using(&["propensity"])
        .warn(extreme_warning(&ps)))
}

/// Doubly robust AIPW over observational rows.
pub fn aipw_observational(
    ds: &CombinedDataset,
    propensity: &LogisticModelFit,
    models: &OutcomeModels,
) -> Result<AteEstimate> {
    let rows = observed_rows(ds)?;
    let ps: Vec<f64> = rows
        .iter()
        .map(|&i| propensity.predict_proba(ds.x(i)))
        .collect();
    let total: f64 = rows
        .iter()
        .zip(&ps)
        .map(|(&i, &e)| {
            let x = ds.x(i);
            let a = f64::from(ds.treatment(i).unwrap());
            let y = ds.y(i);
            let (m1, m0) = (models.mu1(x), models.mu0(x));
            a * (y - m1) / e - (1.0 - a) * (y - m0) / (1.0 - e) + m1 - m0
        })
        .sum();
    Ok(AteEstimate::new(total / rows.len() as f64, "aipw_obs")?
        .using(&["propensity", "outcome"])
        .warn(extreme_warning(&ps))
        .warn(models.warning()))
}
