//! Population-level identification functionals on a finite discrete model.
//!
//! The reweighting and regression forms identify the same target ATE; on an
//! exact discrete population both can be evaluated without sampling error.

use crate::error::{Error, Result};

/// Discrete covariate X with finitely many levels, a trial selected by
/// π(x) = P(S = 1 | X = x), randomized treatment with probability e₁(x),
/// and an outcome on a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePopulation {
    /// Target marginal P(X = x).
    pub p_x: Vec<f64>,
    /// Selection probability per level.
    pub pi: Vec<f64>,
    /// Trial treatment probability per level.
    pub e1: Vec<f64>,
    pub y_values: Vec<f64>,
    /// `p_y[a][x][j]` = P(Y = y_j | X = x, A = a), shared by trial and target.
    pub p_y: [Vec<Vec<f64>>; 2],
}

impl DiscretePopulation {
    pub fn validate(&self) -> Result<()> {
        let k = self.p_x.len();
        let ok_len = self.pi.len() == k
            && self.e1.len() == k
            && self
                .p_y
                .iter()
                .all(|t| t.len() == k && t.iter().all(|r| r.len() == self.y_values.len()));
        if !ok_len {
            return Err(Error::InvalidData(
                "discrete population tables disagree in size".into(),
            ));
        }
        let sums_to_one = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        if !sums_to_one(&self.p_x) || self.p_y.iter().flatten().any(|r| !sums_to_one(r)) {
            return Err(Error::InvalidData(
                "probability table does not sum to 1".into(),
            ));
        }
        let open = |v: &f64| *v > 0.0 && *v < 1.0;
        if !self.pi.iter().all(open)
            || !self.e1.iter().all(open)
            || self.p_x.iter().any(|p| *p <= 0.0)
        {
            return Err(Error::InvalidData("positivity violated".into()));
        }
        Ok(())
    }

    /// Joint trial law P(X = x, A = a, Y = y_j | S = 1) as `[x][a][j]`.
    pub fn trial_joint(&self) -> Vec<[Vec<f64>; 2]> {
        let ps1: f64 = self.p_x.iter().zip(&self.pi).map(|(p, s)| p * s).sum();
        (0..self.p_x.len())
            .map(|x| {
                let fx = self.p_x[x] * self.pi[x] / ps1;
                let arm = |a: usize| {
                    let pa = if a == 1 { self.e1[x] } else { 1.0 - self.e1[x] };
                    self.p_y[a][x].iter().map(|py| fx * pa * py).collect()
                };
                [arm(0), arm(1)]
            })
            .collect()
    }
}

/// `E[ f(X)/f(X|S=1) · (A Y/e₁ − (1−A) Y/(1−e₁)) | S = 1 ]`, summed over
/// the trial joint law.
pub fn reweighting_functional(pop: &DiscretePopulation) -> Result<f64> {
    pop.validate()?;
    let joint = pop.trial_joint();
    let mut total = 0.0;
    for (x, cell) in joint.iter().enumerate() {
        let fx1: f64 = cell.iter().flatten().sum();
        let w = pop.p_x[x] / fx1;
        for (a, probs) in cell.iter().enumerate() {
            let sign = if a == 1 {
                1.0 / pop.e1[x]
            } else {
                -1.0 / (1.0 - pop.e1[x])
            };
            for (p, y) in probs.iter().zip(&pop.y_values) {
                total += p * w * sign * y;
            }
        }
    }
    Ok(total)
}

/// `Σ_x P(x) (E[Y | x, A=1, S=1] − E[Y | x, A=0, S=1])` with the
/// conditional means read off the trial joint law.
pub fn regression_functional(pop: &DiscretePopulation) -> Result<f64> {
    pop.validate()?;
    let joint = pop.trial_joint();
    let mut total = 0.0;
    for (x, cell) in joint.iter().enumerate() {
        let mean = |a: usize| {
            let mass: f64 = cell[a].iter().sum();
            cell[a]
                .iter()
                .zip(&pop.y_values)
                .map(|(p, y)| p * y)
                .sum::<f64>()
                / mass
        };
        total += pop.p_x[x] * (mean(1) - mean(0));
    }
    Ok(total)
}
