//! Correcting a confounded observational CATE with a low-complexity bias
//! function learned on the trial.

use serde::Serialize;

use crate::data::CombinedDataset;
use crate::error::Result;
use crate::nuisance::{affine, fit_ols};

use super::fit_outcome_models_on;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CateProvenance {
    Rct,
    Observational,
    Deconfounded,
}

/// Affine CATE surface τ(x) = c₀ + cᵀx.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CateModel {
    pub coefficients: Vec<f64>,
    pub provenance: CateProvenance,
    /// Bias-function coefficients θ̂ added by deconfounding.
    pub correction: Option<Vec<f64>>,
}

impl CateModel {
    pub fn new(coefficients: Vec<f64>, provenance: CateProvenance) -> Self {
        Self {
            coefficients,
            provenance,
            correction: None,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        affine(&self.coefficients, x)
    }

    /// Mean prediction over the given dataset rows.
    pub fn average(&self, ds: &CombinedDataset, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.predict(ds.x(i))).sum::<f64>() / rows.len() as f64
    }
}

/// Difference of arm-wise OLS fits on the observational rows.
pub fn observational_cate(ds: &CombinedDataset) -> Result<CateModel> {
    let models = fit_outcome_models_on(ds, ds.target_rows())?;
    let coefficients = models
        .treated
        .coefficients
        .iter()
        .zip(&models.control.coefficients)
        .map(|(a, b)| a - b)
        .collect();
    Ok(CateModel::new(coefficients, CateProvenance::Observational))
}

/// Learns η(x) = θᵀ(1, x) by OLS of `Y* − obs_cate(X)` on the trial rows,
/// where `Y* = (A/e − (1−A)/(1−e)) Y` is unbiased for τ(X) under
/// randomization, and returns `x ↦ obs_cate(x) + θ̂ᵀ(1, x)`.
pub fn kallus_deconfound(obs_cate: &CateModel, ds: &CombinedDataset) -> Result<CateModel> {
    let rows = ds.trial_rows();
    let target: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let (a, e) = (ds.a(i), ds.e1(i));
            let y_star = (a / e - (1.0 - a) / (1.0 - e)) * ds.y(i);
            y_star - obs_cate.predict(ds.x(i))
        })
        .collect();
    let theta = fit_ols(&ds.design_rows(rows), &target)?.coefficients;
    let coefficients = obs_cate
        .coefficients
        .iter()
        .zip(&theta)
        .map(|(c, t)| c + t)
        .collect();
    Ok(CateModel {
        coefficients,
        provenance: CateProvenance::Deconfounded,
        correction: Some(theta),
    })
}
