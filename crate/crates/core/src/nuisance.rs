//! Parametric nuisance models: arm-wise OLS outcome regressions and logistic
//! selection / propensity models.
//!
//! All fits use an intercept; coefficient vectors are `(intercept, slopes…)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{CombinedDataset, Source};
use crate::error::{Error, Result};

/// Ridge added to rank-deficient normal equations.
pub const RIDGE_FALLBACK: f64 = 1e-8;

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_SCORE_TOL: f64 = 1e-10;
const DIVERGENCE_NORM: f64 = 1e4;
const SCORE_EQ_MAX_ITER: usize = 200;
const SCORE_EQ_TOL: f64 = 1e-10;
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arm {
    Treated,
    Control,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModelFit {
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub arm: Arm,
    /// Normal equations were singular and the ridge fallback was used.
    pub rank_deficient: bool,
}

impl LinearModelFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        affine(&self.coefficients, x)
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        self.arm = arm;
        self
    }
}

pub(crate) fn affine(coef: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(coef.len(), x.len() + 1);
    coef[0] + coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

fn design_matrix(x: &[&[f64]]) -> DMatrix<f64> {
    let cols = x.first().map_or(1, |r| r.len() + 1);
    DMatrix::from_fn(x.len(), cols, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Ordinary least squares with intercept.
///
/// Solved by Householder QR; when the design is numerically rank deficient
/// the normal equations are solved with a tiny ridge instead and the fit is
/// flagged.
pub fn fit_ols(x: &[&[f64]], y: &[f64]) -> Result<LinearModelFit> {
    assert_eq!(x.len(), y.len(), "design and response lengths differ");
    let rows = x.len();
    let params = x.first().map_or(1, |r| r.len() + 1);
    if rows < params {
        return Err(Error::TooFewRows { rows, params });
    }
    let z = design_matrix(x);
    let yv = DVector::from_column_slice(y);

    let qr = z.clone().qr();
    let r = qr.r();
    let max_diag = (0..params).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let full_rank = (0..params).all(|j| r[(j, j)].abs() > 1e-10 * max_diag.max(1.0));

    let (beta, rank_deficient) = if full_rank {
        let qty = qr.q().transpose() * &yv;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::InvalidData("singular triangular factor".into()))?;
        (beta, false)
    } else {
        let mut ztz = z.transpose() * &z;
        for j in 0..params {
            ztz[(j, j)] += RIDGE_FALLBACK;
        }
        let zty = z.transpose() * &yv;
        let beta = ztz
            .cholesky()
            .map(|c| c.solve(&zty))
            .ok_or_else(|| Error::InvalidData("ridge system not positive definite".into()))?;
        (beta, true)
    };

    let resid = &yv - &z * &beta;
    let dof = rows.saturating_sub(params);
    let residual_variance = if dof > 0 {
        resid.norm_squared() / dof as f64
    } else {
        0.0
    };
    Ok(LinearModelFit {
        coefficients: beta.iter().copied().collect(),
        residual_variance,
        arm: Arm::Pooled,
        rank_deficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SamplingMethod {
    /// Plain logistic MLE of the in-trial label on the stacked samples.
    Mle,
    /// Log-partition term averaged over the observational sample.
    ModifiedMle,
    /// Solves the weighting balance equations.
    EstimatingEq,
}

impl std::str::FromStr for SamplingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Self::Mle),
            "modified-mle" | "mmle" => Ok(Self::ModifiedMle),
            "ee" | "estimating-eq" => Ok(Self::EstimatingEq),
            other => Err(Error::InvalidData(format!(
                "unknown sampling-score method `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitStatus {
    Converged,
    /// Iteration cap reached before the score tolerance.
    MaxIterations,
    /// Perfect or quasi-perfect separation.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModelFit {
    pub coefficients: Vec<f64>,
    pub status: FitStatus,
    pub iterations: usize,
    pub method: SamplingMethod,
    /// Population size used by the sampling-score fits (given or N̂ at the solution).
    pub population_size: Option<f64>,
}

impl LogisticModelFit {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        affine(&self.coefficients, x)
    }

    /// Fitted probability, kept strictly inside (0, 1).
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }

    /// p / (1 - p).
    pub fn odds(&self, x: &[f64]) -> f64 {
        let p = self.predict_proba(x);
        p / (1.0 - p)
    }

    /// Errors unless the Newton iterations converged.
    pub fn require_converged(self) -> Result<Self> {
        match self.status {
            FitStatus::Converged => Ok(self),
            FitStatus::Diverged => Err(Error::Diverged {
                norm: norm(&self.coefficients),
            }),
            FitStatus::MaxIterations => Err(Error::NonConvergence {
                what: "logistic regression",
                iterations: self.iterations,
            }),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn expit(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + exp(eta)) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Logistic regression by Newton–Raphson with step halving.
///
/// Stops when the largest component of the mean score drops below 1e-10 or
/// after 100 iterations. Separation (coefficient norm above 1e4, a singular
/// Hessian, or every label fitted to within 1e-6) yields
/// `FitStatus::Diverged` rather than an error.
pub fn fit_logistic(x: &[&[f64]], labels: &[bool]) -> Result<LogisticModelFit> {
    assert_eq!(x.len(), labels.len(), "design and label lengths differ");
    let ones = labels.iter().filter(|&&l| l).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClass);
    }
    let z = design_matrix(x);
    let (rows, params) = z.shape();
    if rows < params {
        return Err(Error::TooFewRows { rows, params });
    }
    let l = DVector::from_iterator(rows, labels.iter().map(|&b| f64::from(u8::from(b))));
    let nf = rows as f64;

    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = &z * beta;
        eta.iter()
            .zip(l.iter())
            .map(|(e, y)| y * e - softplus(*e))
            .sum::<f64>()
            / nf
    };

    let mut beta = DVector::<f64>::zeros(params);
    let mut ll = loglik(&beta);
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for it in 0..=LOGISTIC_MAX_ITER {
        iterations = it;
        let eta = &z * &beta;
        let p = eta.map(expit);
        let score = z.tr_mul(&(&l - &p)) / nf;
        if score.amax() < LOGISTIC_SCORE_TOL {
            status = FitStatus::Converged;
            break;
        }
        if it == LOGISTIC_MAX_ITER {
            break;
        }
        let w = p.map(|v| v * (1.0 - v));
        let mut zw = z.clone();
        for (mut row, wi) in zw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let hess = z.tr_mul(&zw) / nf;
        let Some(chol) = hess.cholesky() else {
            status = FitStatus::Diverged;
            break;
        };
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cll = loglik(&cand);
            if cll >= ll - 1e-14 * ll.abs().max(1.0) {
                beta = cand;
                ll = cll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No ascent possible at machine precision; the score test decides.
            let p = (&z * &beta).map(expit);
            let score = z.tr_mul(&(&l - &p)) / nf;
            if score.amax() < 1e-8 {
                status = FitStatus::Converged;
            }
            break;
        }
        if beta.norm() > DIVERGENCE_NORM {
            status = FitStatus::Diverged;
            break;
        }
    }
    if status != FitStatus::Diverged {
        let p = (&z * &beta).map(expit);
        let perfect = p
            .iter()
            .zip(l.iter())
            .all(|(pi, li)| (pi - li).abs() < 1e-6);
        // A finite optimum cannot classify every row weakly correctly with
        // at least one strict margin: the likelihood would still increase
        // along β.
        let eta = &z * &beta;
        let margins: Vec<f64> = eta
            .iter()
            .zip(l.iter())
            .map(|(e, li)| (2.0 * li - 1.0) * e)
            .collect();
        let separated = margins.iter().all(|&v| v >= -1e-6) && margins.iter().any(|&v| v > 1e-3);
        if perfect || separated {
            status = FitStatus::Diverged;
        }
    }
    Ok(LogisticModelFit {
        coefficients: beta.iter().copied().collect(),
        status,
        iterations,
        method: SamplingMethod::Mle,
        population_size: None,
    })
}

/// Moment functions g(X) used for balancing: each listed power applied to
/// every covariate. `"x"` gives the first moments, `"x,x^2"` adds squares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentSpec {
    powers: Vec<u32>,
}

impl Default for MomentSpec {
    fn default() -> Self {
        Self { powers: vec![1] }
    }
}

impl MomentSpec {
    pub fn first() -> Self {
        Self::default()
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let mut powers = Vec::new();
        for term in spec.split(',').map(str::trim) {
            let k = match term {
                "x" => 1,
                t => t
                    .strip_prefix("x^")
                    .and_then(|k| k.parse::<u32>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::BadMomentSpec(spec.to_string()))?,
            };
            if powers.contains(&k) {
                return Err(Error::BadMomentSpec(spec.to_string()));
            }
            powers.push(k);
        }
        Ok(Self { powers })
    }

    pub fn dim(&self, p: usize) -> usize {
        self.powers.len() * p
    }

    /// g(x) without the constant term.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim(x.len()));
        for &k in &self.powers {
            out.extend(x.iter().map(|v| v.powi(k as i32)));
        }
        out
    }
}

impl std::fmt::Display for MomentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let terms: Vec<String> = self
            .powers
            .iter()
            .map(|&k| if k == 1 { "x".into() } else { format!("x^{k}") })
            .collect();
        f.write_str(&terms.join(","))
    }
}

/// Fits the trial selection score π_S(x) = expit(α₀ + α₁ᵀx).
///
/// `Mle` returns the stacked-sample label model (which estimates π_R, the
/// in-pool membership probability). `ModifiedMle` maximises
/// `(1/N) Σ_trial zᵀα − (1/m) Σ_obs log(1 + exp(zᵀα))`. `EstimatingEq`
/// solves `(1/N) Σ_trial g/π = (1/m) Σ_obs g` with `g = (1, moments)`.
/// When `population_size` is `None`, N is replaced by
/// `N̂(α) = Σ_trial 1/π(X_i; α)` inside the equations.
pub fn fit_sampling_score(
    ds: &CombinedDataset,
    method: SamplingMethod,
    population_size: Option<f64>,
    g: &MomentSpec,
) -> Result<LogisticModelFit> {
    let all: Vec<usize> = (0..ds.rows()).collect();
    let x = ds.design_rows(&all);
    let labels: Vec<bool> = all.iter().map(|&i| ds.source(i) == Source::Trial).collect();
    let mle = fit_logistic(&x, &labels)?;
    if method == SamplingMethod::Mle {
        return Ok(mle);
    }
    if ds.m() == 0 {
        return Err(Error::NoObservationalRows);
    }
    let trial = design_matrix(&ds.design_rows(ds.trial_rows()));
    let obs = design_matrix(&ds.design_rows(ds.target_rows()));
    let n = trial.nrows() as f64;
    let m = obs.nrows() as f64;
    let params = trial.ncols();

    // Start from the stacked MLE with the intercept shifted to the implied
    // base rate; the equations are solved from there.
    let mut start = DVector::from_column_slice(&mle.coefficients);
    let base = population_size.map_or((n / (n + m)).min(0.5), |nn| (n / nn).clamp(1e-12, 0.5));
    start[0] += logit(base) - logit(n / (n + m));

    let inv_pi = |beta: &DVector<f64>| -> Vec<(f64, f64)> {
        let eta = &trial * beta;
        eta.iter()
            .map(|&e| {
                let p = expit(e);
                (1.0 / p, (1.0 - p) / p)
            })
            .collect()
    };

    let solution = match method {
        SamplingMethod::ModifiedMle => {
            let trial_sum = trial.row_sum().transpose();
            let system = |beta: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
                let eta = &obs * beta;
                let p = eta.map(expit);
                let mut grad = -(obs.tr_mul(&p) / m);
                let mut zw = obs.clone();
                for (mut row, pi) in zw.row_iter_mut().zip(p.iter()) {
                    row *= pi * (1.0 - pi);
                }
                let mut jac = -(obs.tr_mul(&zw) / m);
                match population_size {
                    Some(nn) => grad += &trial_sum / nn,
                    None => {
                        let ip = inv_pi(beta);
                        let nhat: f64 = ip.iter().map(|v| v.0).sum();
                        grad += &trial_sum / nhat;
                        // dN̂/dα = −Σ (1−π)/π z
                        let mut dn = DVector::zeros(params);
                        for (row, (_, r)) in trial.row_iter().zip(&ip) {
                            dn -= row.transpose() * *r;
                        }
                        jac -= (&trial_sum * dn.transpose()) / (nhat * nhat);
                    }
                }
                (grad, jac)
            };
            solve_system(system, start, "modified MLE")?
        }
        SamplingMethod::EstimatingEq => {
            let gt = moment_matrix(ds, ds.trial_rows(), g);
            let go = moment_matrix(ds, ds.target_rows(), g);
            let target = go.row_mean().transpose();
            let k = gt.ncols();
            let system = |beta: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
                let ip = inv_pi(beta);
                let mut s = DVector::zeros(k);
                let mut ds_da = DMatrix::zeros(k, params);
                let mut dn = DVector::zeros(params);
                let mut nhat = 0.0;
                for ((grow, zrow), (w, r)) in gt.row_iter().zip(trial.row_iter()).zip(&ip) {
                    s += grow.transpose() * *w;
                    // d(1/π)/dα = −(1−π)/π z
                    ds_da -= grow.transpose() * zrow * *r;
                    dn -= zrow.transpose() * *r;
                    nhat += w;
                }
                match population_size {
                    Some(nn) => (&s / nn - &target, ds_da / nn),
                    None => {
                        let f = &s / nhat - &target;
                        let jac = ds_da / nhat - (&s * dn.transpose()) / (nhat * nhat);
                        (f, jac)
                    }
                }
            };
            solve_system(system, start, "estimating equations")?
        }
        SamplingMethod::Mle => unreachable!(),
    };
    let coefficients: Vec<f64> = solution.0.iter().copied().collect();
    let nhat = population_size.unwrap_or_else(|| inv_pi(&solution.0).iter().map(|v| v.0).sum());
    Ok(LogisticModelFit {
        coefficients,
        status: FitStatus::Converged,
        iterations: solution.1,
        method,
        population_size: Some(nhat),
    })
}

/// `(1, g(X_i))` rows for the given dataset rows.
pub(crate) fn moment_matrix(ds: &CombinedDataset, rows: &[usize], g: &MomentSpec) -> DMatrix<f64> {
    let k = g.dim(ds.p()) + 1;
    let mut out = DMatrix::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        out[(r, 0)] = 1.0;
        for (j, v) in g.apply(ds.x(i)).into_iter().enumerate() {
            out[(r, j + 1)] = v;
        }
    }
    out
}

/// Damped Newton / Gauss–Newton on `F(β) = 0`. Steps are least-squares
/// (SVD) solutions so that square, overdetermined and rank-deficient
/// Jacobians are all handled; the step is halved until ‖F‖ decreases.
fn solve_system<F>(
    system: F,
    start: DVector<f64>,
    what: &'static str,
) -> Result<(DVector<f64>, usize)>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut beta = start;
    let (mut f, mut jac) = system(&beta);
    for it in 0..SCORE_EQ_MAX_ITER {
        if f.amax() < SCORE_EQ_TOL {
            return Ok((beta, it));
        }
        let svd = jac.clone().svd(true, true);
        let tol = svd.singular_values.max() * 1e-12;
        let step = svd.solve(&f, tol).map_err(|_| Error::NonConvergence {
            what,
            iterations: it,
        })?;
        let base = f.norm_squared();
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = &beta - &step * t;
            let (cf, cj) = system(&cand);
            if cf.iter().all(|v| v.is_finite()) && cf.norm_squared() < base {
                beta = cand;
                f = cf;
                jac = cj;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if f.amax() < SCORE_EQ_TOL {
        return Ok((beta, SCORE_EQ_MAX_ITER));
    }
    Err(Error::NonConvergence {
        what,
        iterations: SCORE_EQ_MAX_ITER,
    })
}
