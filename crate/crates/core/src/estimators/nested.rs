//! Estimators for a trial nested in a cohort, where S is observed for every
//! row and π_S(x) = P(S = 1 | X = x) is fitted directly.

use serde::Serialize;

use crate::data::{CombinedDataset, Design, Source};
use crate::error::{Error, Result};
use crate::nuisance::{fit_logistic, LogisticModelFit};

use super::{
    fit_outcome_models, fit_outcome_models_on, g_formula_with, AteEstimate, OutcomeModels,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NestedMethod {
    Ipsw,
    IpswNorm,
    GFormula,
    Aipsw,
    /// Efficient estimator of the trial-population effect τ₁.
    EffTau1,
    /// Efficient estimator of the effect over trial and cohort combined.
    EffTau2,
}

impl NestedMethod {
    pub const ALL: [NestedMethod; 6] = [
        NestedMethod::Ipsw,
        NestedMethod::IpswNorm,
        NestedMethod::GFormula,
        NestedMethod::Aipsw,
        NestedMethod::EffTau1,
        NestedMethod::EffTau2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            NestedMethod::Ipsw => "nested_ipsw",
            NestedMethod::IpswNorm => "nested_ipsw_norm",
            NestedMethod::GFormula => "nested_gformula",
            NestedMethod::Aipsw => "nested_aipsw",
            NestedMethod::EffTau1 => "eff_tau1",
            NestedMethod::EffTau2 => "eff_tau2",
        }
    }
}

impl std::str::FromStr for NestedMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NestedMethod::ALL
            .into_iter()
            .find(|m| m.id() == s || m.id().strip_prefix("nested_") == Some(s))
            .ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }
}

/// Population the effect is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum NestedTarget {
    /// All n + m cohort members.
    #[default]
    Cohort,
    /// Only the S = 0 members.
    NonRandomized,
}

fn selection_model(ds: &CombinedDataset) -> Result<LogisticModelFit> {
    let all: Vec<usize> = (0..ds.rows()).collect();
    let labels: Vec<bool> = all.iter().map(|&i| ds.source(i) == Source::Trial).collect();
    fit_logistic(&ds.design_rows(&all), &labels)?.require_converged()
}

pub fn estimate_nested(
    ds: &CombinedDataset,
    method: NestedMethod,
    target: NestedTarget,
) -> Result<AteEstimate> {
    if ds.design() != Design::Nested {
        return Err(Error::NotNested);
    }
    let n = ds.n() as f64;
    let m = ds.m() as f64;
    let total = n + m;
    let id = method.id();
    match method {
        NestedMethod::Ipsw | NestedMethod::IpswNorm | NestedMethod::Aipsw => {
            let pi = selection_model(ds)?;
            // Per-trial-unit inverse selection weight and its normaliser.
            let (w_of, scale): (Box<dyn Fn(f64) -> f64>, f64) = match target {
                NestedTarget::Cohort => (Box::new(|p| 1.0 / p), total),
                NestedTarget::NonRandomized => (Box::new(|p| (1.0 - p) / p), m),
            };
            let weights: Vec<f64> = ds
                .trial_rows()
                .iter()
                .map(|&i| w_of(pi.predict_proba(ds.x(i))))
                .collect();
            match method {
                NestedMethod::Ipsw => {
                    let s: f64 = ds
                        .trial_rows()
                        .iter()
                        .zip(&weights)
                        .map(|(&i, w)| {
                            let (a, y, e) = (ds.a(i), ds.y(i), ds.e1(i));
                            w * (a * y / e - (1.0 - a) * y / (1.0 - e))
                        })
                        .sum();
                    Ok(AteEstimate::new(s / scale, id)?.using(&["selection"]))
                }
                NestedMethod::IpswNorm => {
                    let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
                    for (&i, w) in ds.trial_rows().iter().zip(&weights) {
                        let e = ds.e1(i);
                        if ds.a(i) == 1.0 {
                            n1 += w / e * ds.y(i);
                            d1 += w / e;
                        } else {
                            n0 += w / (1.0 - e) * ds.y(i);
                            d0 += w / (1.0 - e);
                        }
                    }
                    if d1 <= 0.0 {
                        return Err(Error::ZeroWeightSum("treated"));
                    }
                    if d0 <= 0.0 {
                        return Err(Error::ZeroWeightSum("control"));
                    }
                    Ok(AteEstimate::new(n1 / d1 - n0 / d0, id)?
                        .normalized(true)
                        .using(&["selection"]))
                }
                _ => {
                    let models = fit_outcome_models(ds)?;
                    let aug: f64 = ds
                        .trial_rows()
                        .iter()
                        .zip(&weights)
                        .map(|(&i, w)| {
                            let (a, y, e, x) = (ds.a(i), ds.y(i), ds.e1(i), ds.x(i));
                            w * (a * (y - models.mu1(x)) / e
                                - (1.0 - a) * (y - models.mu0(x)) / (1.0 - e))
                        })
                        .sum::<f64>()
                        / scale;
                    let g = nested_g(ds, &models, target);
                    Ok(AteEstimate::new(aug + g, id)?.using(&["selection", "outcome"]))
                }
            }
        }
        NestedMethod::GFormula => {
            let models = fit_outcome_models(ds)?;
            let value = match target {
                NestedTarget::Cohort => nested_g(ds, &models, target),
                NestedTarget::NonRandomized => g_formula_with(ds, &models)?.value,
            };
            Ok(AteEstimate::new(value, id)?.using(&["outcome"]))
        }
        NestedMethod::EffTau1 | NestedMethod::EffTau2 => {
            if target != NestedTarget::Cohort {
                return Err(Error::Unsupported(format!(
                    "{id} is defined for the whole cohort only"
                )));
            }
            efficient(ds, method)
        }
    }
}

fn nested_g(ds: &CombinedDataset, models: &OutcomeModels, target: NestedTarget) -> f64 {
    let rows: Vec<usize> = match target {
        NestedTarget::Cohort => (0..ds.rows()).collect(),
        NestedTarget::NonRandomized => ds.target_rows().to_vec(),
    };
    rows.iter().map(|&i| models.contrast(ds.x(i))).sum::<f64>() / rows.len() as f64
}

/// Efficient combined estimators. ê is e₁ on trial rows and a logistic fit
/// of A on X among S = 0 rows; μ̂ₐ are arm-wise OLS fits on all rows.
fn efficient(ds: &CombinedDataset, method: NestedMethod) -> Result<AteEstimate> {
    if let Some(&bad) = ds
        .target_rows()
        .iter()
        .find(|&&i| ds.treatment(i).is_none() || ds.outcome(i).is_none())
    {
        return Err(Error::MissingTreatmentOutcome { row: bad + 1 });
    }
    let all: Vec<usize> = (0..ds.rows()).collect();
    let models = fit_outcome_models_on(ds, &all)?;
    let obs = ds.target_rows();
    let obs_labels: Vec<bool> = obs.iter().map(|&i| ds.treatment(i) == Some(1)).collect();
    let prop = fit_logistic(&ds.design_rows(obs), &obs_labels)?.require_converged()?;
    let e_hat = |i: usize| match ds.source(i) {
        Source::Trial => ds.e1(i),
        Source::Observational => prop.predict_proba(ds.x(i)),
    };
    let value = match method {
        NestedMethod::EffTau1 => {
            let pi = selection_model(ds)?;
            all.iter()
                .map(|&i| {
                    let x = ds.x(i);
                    let (a, y, e) = (ds.a(i), ds.y(i), e_hat(i));
                    let s = if ds.source(i) == Source::Trial {
                        1.0
                    } else {
                        0.0
                    };
                    let p = pi.predict_proba(x);
                    p * a * y / e + (s - a * p / e) * models.mu1(x)
                        - p * (1.0 - a) * y / (1.0 - e)
                        - (s - (1.0 - a) * p / (1.0 - e)) * models.mu0(x)
                })
                .sum::<f64>()
                / ds.n() as f64
        }
        _ => {
            all.iter()
                .map(|&i| {
                    let x = ds.x(i);
                    let (a, y, e) = (ds.a(i), ds.y(i), e_hat(i));
                    let (m1, m0) = (models.mu1(x), models.mu0(x));
                    a * (y - m1) / e - (1.0 - a) * (y - m0) / (1.0 - e) + m1 - m0
                })
                .sum::<f64>()
                / all.len() as f64
        }
    };
    let uses: &[&'static str] = if method == NestedMethod::EffTau1 {
        &["selection", "propensity", "outcome"]
    } else {
        &["propensity", "outcome"]
    };
    Ok(AteEstimate::new(value, method.id())?.using(uses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialPropensity;
    use crate::estimators::difference_in_means;
    use approx::assert_abs_diff_eq;

    /// Nested dataset where the covariate carries no selection information:
    /// the trial and cohort rows share the same covariate multiset.
    fn balanced(obs_full: bool) -> CombinedDataset {
        let xs = [0.1, 0.5, 0.9, 1.3];
        let mut cov = Vec::new();
        let mut treatment = Vec::new();
        let mut outcome = Vec::new();
        let mut source = Vec::new();
        for (k, &x) in xs.iter().enumerate() {
            for a in 0..2u8 {
                cov.push(x);
                treatment.push(Some(a));
                outcome.push(Some(1.0 + x + f64::from(a) * (2.0 + f64::from(k as u8))));
                source.push(Source::Trial);
            }
        }
        for (k, &x) in xs.iter().enumerate() {
            for a in 0..2u8 {
                cov.push(x);
                treatment.push(obs_full.then_some(a));
                outcome.push(obs_full.then_some(0.5 * x + f64::from(a) * f64::from(k as u8)));
                source.push(Source::Observational);
            }
        }
        CombinedDataset::new(
            cov,
            1,
            treatment,
            outcome,
            source,
            Design::Nested,
            TrialPropensity::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_selection_normalized_is_dm() {
        let ds = balanced(false);
        let v = estimate_nested(&ds, NestedMethod::IpswNorm, NestedTarget::Cohort)
            .unwrap()
            .value;
        assert_abs_diff_eq!(v, difference_in_means(&ds).unwrap().value, epsilon = 1e-10);
        let u = estimate_nested(&ds, NestedMethod::Ipsw, NestedTarget::Cohort)
            .unwrap()
            .value;
        // π̂ = 1/2 and n/(n+m) = 1/2 cancel: unnormalized equals DM for balanced arms.
        assert_abs_diff_eq!(u, difference_in_means(&ds).unwrap().value, epsilon = 1e-8);
    }

    #[test]
    fn requires_nested_design() {
        let ds = balanced(false).with_design(Design::NonNested);
        assert_eq!(
            estimate_nested(&ds, NestedMethod::Ipsw, NestedTarget::Cohort),
            Err(Error::NotNested)
        );
    }

    #[test]
    fn efficient_variants_need_cohort_outcomes() {
        let ds = balanced(false);
        assert!(matches!(
            estimate_nested(&ds, NestedMethod::EffTau2, NestedTarget::Cohort),
            Err(Error::MissingTreatmentOutcome { .. })
        ));
    }

    #[test]
    fn method_ids_round_trip() {
        for m in NestedMethod::ALL {
            assert_eq!(m.id().parse::<NestedMethod>().unwrap(), m);
        }
        assert_eq!(
            "ipsw_norm".parse::<NestedMethod>().unwrap(),
            NestedMethod::IpswNorm
        );
    }
}
