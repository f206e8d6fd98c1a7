//! Trial-unit weights: selection odds, calibration (entropy balancing) weights
//! and selection-score strata.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{CombinedDataset, Design, Source};
use crate::error::{Error, Result};
use crate::nuisance::{fit_logistic, moment_matrix, LogisticModelFit, MomentSpec};

const EB_TOL: f64 = 1e-8;
const EB_MAX_ITER: usize = 500;
const EB_LAMBDA_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightKind {
    OddsAlpha,
    Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Logistic(LogisticModelFit),
    /// Dual multipliers of the balancing problem.
    Dual(Vec<f64>),
    Manual,
}

/// One value per trial unit, in `CombinedDataset::trial_rows` order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    kind: WeightKind,
    normalized: bool,
    source: WeightSource,
}

impl WeightVector {
    /// Hand-set weights; every value must be finite and positive.
    pub fn manual(values: Vec<f64>, kind: WeightKind) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidData(
                "weights must be finite and positive".into(),
            ));
        }
        Ok(Self {
            values,
            kind,
            normalized: false,
            source: WeightSource::Manual,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Selection model behind odds weights.
    pub fn model(&self) -> Option<&LogisticModelFit> {
        match &self.source {
            WeightSource::Logistic(m) => Some(m),
            _ => None,
        }
    }

    /// Dual multipliers behind calibration weights.
    pub fn lambda(&self) -> Option<&[f64]> {
        match &self.source {
            WeightSource::Dual(l) => Some(l),
            _ => None,
        }
    }

    /// Truncates the inverse-odds weights `1/α̂` at their `quantile`
    /// (type-7) and returns the matching odds. Only meaningful for odds.
    pub fn capped(&self, quantile: f64) -> Result<Self> {
        if self.kind != WeightKind::OddsAlpha || !(0.0..=1.0).contains(&quantile) {
            return Err(Error::InvalidData(
                "weight cap applies to odds with quantile in [0,1]".into(),
            ));
        }
        let mut inv: Vec<f64> = self.values.iter().map(|a| 1.0 / a).collect();
        let mut sorted = inv.clone();
        sorted.sort_by(f64::total_cmp);
        let cap = quantile_sorted(&sorted, quantile);
        for w in &mut inv {
            *w = w.min(cap);
        }
        Ok(Self {
            values: inv.iter().map(|w| 1.0 / w).collect(),
            ..self.clone()
        })
    }
}

/// Type-7 sample quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits the in-trial label on the stacked covariates and returns
/// α̂(X_i) = p̂_i / (1 − p̂_i) for each trial unit.
pub fn estimate_alpha(ds: &CombinedDataset) -> Result<WeightVector> {
    if ds.design() != Design::NonNested {
        return Err(Error::NotNonNested);
    }
    let all: Vec<usize> = (0..ds.rows()).collect();
    let labels: Vec<bool> = all.iter().map(|&i| ds.source(i) == Source::Trial).collect();
    let model = fit_logistic(&ds.design_rows(&all), &labels)?.require_converged()?;
    let values = ds
        .trial_rows()
        .iter()
        .map(|&i| model.odds(ds.x(i)))
        .collect();
    Ok(WeightVector {
        values,
        kind: WeightKind::OddsAlpha,
        normalized: false,
        source: WeightSource::Logistic(model),
    })
}

/// Entropy-balancing weights: minimise Σ ω log ω subject to Σ ω = 1 and
/// Σ ω g(X_i) = target. Rows of `trial_g` are g(X_i) without a constant.
///
/// Solved through the dual ω ∝ exp(λ·g) by damped Newton until the largest
/// constraint residual is below 1e-8, plus one polishing step; the result is
/// renormalised to sum to 1.
pub fn entropy_balance(trial_g: &[&[f64]], target: &[f64]) -> Result<WeightVector> {
    let n = trial_g.len();
    let k = target.len();
    if n == 0 || trial_g.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidData(
            "moment matrix shape does not match target".into(),
        ));
    }
    // Centred moments h_i = g_i − target: the constraint becomes Σ ω h = 0.
    let h = DMatrix::from_fn(n, k, |i, j| trial_g[i][j] - target[j]);

    let mut aug = DMatrix::from_element(n, k + 1, 1.0);
    aug.view_mut((0, 1), (n, k)).copy_from(&h);
    let sv = aug.singular_values();
    if sv.min() <= 1e-10 * sv.max().max(1.0) || n < k + 1 {
        return Err(Error::RankDeficientMoments);
    }
    for j in 0..k {
        let col = h.column(j);
        if col.max() < 0.0 || col.min() > 0.0 {
            return Err(Error::Infeasible);
        }
    }

    let weights = |lambda: &DVector<f64>| -> (DVector<f64>, f64) {
        let eta = &h * lambda;
        let top = eta.max();
        let e = eta.map(|v| (v - top).exp());
        let z = e.sum();
        (e / z, top + z.ln())
    };

    let finish = |w: &DVector<f64>, lambda: &DVector<f64>| -> Result<WeightVector> {
        let total = w.sum();
        let values: Vec<f64> = w.iter().map(|v| v / total).collect();
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Infeasible);
        }
        Ok(WeightVector {
            values,
            kind: WeightKind::Calibration,
            normalized: true,
            source: WeightSource::Dual(lambda.iter().copied().collect()),
        })
    };

    let mut lambda = DVector::<f64>::zeros(k);
    let (mut w, mut dual) = weights(&lambda);
    // One extra Newton step once within tolerance.
    let mut polished = false;
    for _ in 0..EB_MAX_ITER {
        let resid = h.tr_mul(&w);
        let converged = resid.amax() < EB_TOL;
        if converged && polished {
            return finish(&w, &lambda);
        }
        polished |= converged;
        // Hessian of log Σ exp(λ·h): weighted covariance of h.
        let mut hw = h.clone();
        for (mut row, wi) in hw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let hess = h.tr_mul(&hw) - &resid * resid.transpose();
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&resid),
            None => hess
                .svd(true, true)
                .solve(&resid, 1e-14)
                .map_err(|_| Error::Infeasible)?,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda - &step * t;
            let (cw, cd) = weights(&cand);
            // Near the optimum the dual decrease drops below rounding, so a
            // smaller residual is also accepted.
            if cd.is_finite() && (cd < dual || h.tr_mul(&cw).amax() < resid.amax()) {
                lambda = cand;
                w = cw;
                dual = cd;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved && converged {
            return finish(&w, &lambda);
        }
        if !moved || lambda.norm() > EB_LAMBDA_LIMIT {
            return Err(Error::Infeasible);
        }
    }
    Err(Error::Infeasible)
}

/// Calibration weights balancing the trial moments g(X) against the
/// observational sample means.
pub fn calibration_weights(ds: &CombinedDataset, g: &MomentSpec) -> Result<WeightVector> {
    let gt = moment_matrix(ds, ds.trial_rows(), g);
    let go = moment_matrix(ds, ds.target_rows(), g);
    let target: Vec<f64> = go.row_mean().iter().skip(1).copied().collect();
    let rows: Vec<Vec<f64>> = gt
        .row_iter()
        .map(|r| r.iter().skip(1).copied().collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    entropy_balance(&refs, &target)
}

/// Stratum labels (1-based) for trial and observational units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataAssignment {
    /// Per trial unit, `trial_rows` order.
    pub trial: Vec<usize>,
    /// Per observational unit, `target_rows` order.
    pub target: Vec<usize>,
    pub l: usize,
    pub breakpoints: Vec<f64>,
}

/// Strata from the L−1 interior type-7 quantiles of α̂ over the stacked
/// sample. Stratum l holds values in (b_{l−1}, b_l]. Tied breakpoints are
/// merged and strata holding no unit at all are dropped, so L may shrink.
pub fn assign_strata(
    model: &LogisticModelFit,
    ds: &CombinedDataset,
    l: usize,
) -> Result<StrataAssignment> {
    if l < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 strata, got {l}"
        )));
    }
    let odds: Vec<f64> = (0..ds.rows()).map(|i| model.odds(ds.x(i))).collect();
    let mut sorted = odds.clone();
    sorted.sort_by(f64::total_cmp);
    let mut breaks: Vec<f64> = (1..l)
        .map(|k| quantile_sorted(&sorted, k as f64 / l as f64))
        .collect();
    breaks.dedup();
    // Drop breakpoints at or above the maximum: they only create empty strata.
    let max = *sorted.last().expect("non-empty dataset");
    breaks.retain(|&b| b < max);

    let raw = |v: f64| breaks.partition_point(|&b| b < v);
    let used: std::collections::BTreeSet<usize> = odds.iter().map(|&v| raw(v)).collect();
    let remap: Vec<usize> = {
        let mut r = vec![0; breaks.len() + 1];
        for (new, &old) in used.iter().enumerate() {
            r[old] = new + 1;
        }
        r
    };
    let breakpoints: Vec<f64> = used.iter().skip(1).map(|&s| breaks[s - 1]).collect();
    let trial: Vec<usize> = ds
        .trial_rows()
        .iter()
        .map(|&i| remap[raw(odds[i])])
        .collect();
    let target: Vec<usize> = ds
        .target_rows()
        .iter()
        .map(|&i| remap[raw(odds[i])])
        .collect();
    let strata = StrataAssignment {
        trial,
        target,
        l: used.len(),
        breakpoints,
    };
    strata.check(ds)?;
    Ok(strata)
}

impl StrataAssignment {
    /// Errors unless every stratum has a treated, a control and an
    /// observational unit.
    pub fn check(&self, ds: &CombinedDataset) -> Result<()> {
        let mut treated = vec![false; self.l];
        let mut control = vec![false; self.l];
        let mut obs = vec![false; self.l];
        for (&row, &s) in ds.trial_rows().iter().zip(&self.trial) {
            if ds.a(row) == 1.0 {
                treated[s - 1] = true;
            } else {
                control[s - 1] = true;
            }
        }
        for &s in &self.target {
            obs[s - 1] = true;
        }
        for s in 0..self.l {
            let what = if !treated[s] {
                "treated trial unit"
            } else if !control[s] {
                "control trial unit"
            } else if !obs[s] {
                "observational unit"
            } else {
                continue;
            };
            return Err(Error::EmptyStratum {
                stratum: s + 1,
                what,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialPropensity;
    use crate::nuisance::{FitStatus, SamplingMethod};
    use approx::assert_abs_diff_eq;

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn model(coefficients: Vec<f64>) -> LogisticModelFit {
        LogisticModelFit {
            coefficients,
            status: FitStatus::Converged,
            iterations: 0,
            method: SamplingMethod::Mle,
            population_size: None,
        }
    }

    fn dataset(trial_x: &[f64], trial_a: &[u8], obs_x: &[f64]) -> CombinedDataset {
        let mut cov = trial_x.to_vec();
        cov.extend_from_slice(obs_x);
        let n = trial_x.len();
        let m = obs_x.len();
        let mut treatment: Vec<Option<u8>> = trial_a.iter().map(|&a| Some(a)).collect();
        treatment.extend(std::iter::repeat_n(None, m));
        let mut outcome = vec![Some(0.0); n];
        outcome.extend(std::iter::repeat_n(None, m));
        let mut source = vec![Source::Trial; n];
        source.extend(std::iter::repeat_n(Source::Observational, m));
        CombinedDataset::new(
            cov,
            1,
            treatment,
            outcome,
            source,
            Design::NonNested,
            TrialPropensity::default(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_weights_when_target_is_trial_mean() {
        let g = vec![
            vec![0.2, 1.0],
            vec![1.4, -0.5],
            vec![0.9, 2.0],
            vec![-0.3, 0.7],
            vec![2.2, 0.1],
        ];
        let target: Vec<f64> = (0..2)
            .map(|j| g.iter().map(|r| r[j]).sum::<f64>() / 5.0)
            .collect();
        let w = entropy_balance(&rows(&g), &target).unwrap();
        for v in w.values() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-10);
        }
        assert!(w.normalized());
        assert_eq!(w.kind(), WeightKind::Calibration);
    }

    #[test]
    fn one_dimensional_dual_matches_bisection() {
        let g = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let w = entropy_balance(&rows(&g), &[0.75]).unwrap();
        // Oracle: solve e^λ / (1 + e^λ) = 0.75 by bisection.
        let (mut lo, mut hi) = (-20.0f64, 20.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.exp() / (1.0 + mid.exp()) < 0.75 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lam = 0.5 * (lo + hi);
        let w1 = lam.exp() / (2.0 * (1.0 + lam.exp()));
        let w0 = 1.0 / (2.0 * (1.0 + lam.exp()));
        assert_abs_diff_eq!(w0, 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(w1, 0.375, epsilon = 1e-12);
        let expect = [w0, w1, w0, w1];
        for (v, e) in w.values().iter().zip(expect) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn target_outside_hull_is_infeasible() {
        let g = vec![vec![0.0], vec![1.0], vec![0.3], vec![0.8]];
        assert_eq!(entropy_balance(&rows(&g), &[1.5]), Err(Error::Infeasible));
    }

    #[test]
    fn rank_deficient_moments() {
        let g = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 4.0]];
        assert_eq!(
            entropy_balance(&rows(&g), &[1.0, 2.0]),
            Err(Error::RankDeficientMoments)
        );
    }

    #[test]
    fn median_split() {
        let x: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|v| v.ln()).collect();
        let ds = dataset(&x, &[1, 0, 1, 0], &x);
        let st = assign_strata(&model(vec![0.0, 1.0]), &ds, 2).unwrap();
        assert_eq!(st.l, 2);
        assert_abs_diff_eq!(st.breakpoints[0], 2.5, epsilon = 1e-12);
        assert_eq!(st.trial, vec![1, 1, 2, 2]);
        assert_eq!(st.target, vec![1, 1, 2, 2]);
    }

    #[test]
    fn constant_odds_collapse_to_one_stratum() {
        let ds = dataset(&[0.1, 0.5, 0.9], &[1, 0, 1], &[0.2, 0.3]);
        let st = assign_strata(&model(vec![0.3, 0.0]), &ds, 10).unwrap();
        assert_eq!(st.l, 1);
        assert!(st.breakpoints.is_empty());
        assert!(st.trial.iter().chain(&st.target).all(|&s| s == 1));
    }

    #[test]
    fn stratum_without_control_is_an_error() {
        let x = [0.0, 0.1, 2.0, 2.1];
        let ds = dataset(&x, &[1, 0, 1, 1], &x);
        assert_eq!(
            assign_strata(&model(vec![0.0, 1.0]), &ds, 2),
            Err(Error::EmptyStratum {
                stratum: 2,
                what: "control trial unit"
            })
        );
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 1.0), 4.0);
    }

    #[test]
    fn cap_truncates_inverse_odds() {
        let w = WeightVector::manual(vec![0.01, 0.5, 1.0, 2.0], WeightKind::OddsAlpha).unwrap();
        let c = w.capped(0.5).unwrap();
        // 1/α = (100, 2, 1, 0.5); median 1.5.
        assert_abs_diff_eq!(c.values()[0], 1.0 / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.values()[1], 1.0 / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.values()[2], 1.0, epsilon = 1e-12);
    }
}
