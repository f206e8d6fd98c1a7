//! Simulation scenarios: a superpopulation of four N(1, 1) covariates, a
//! logistic trial selection, a Bernoulli(0.5) treatment and linear outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{CombinedDataset, Design, Source, TrialPropensity};
use crate::error::{Error, Result};
use crate::nuisance::expit;

/// Covariate dimension of every scenario.
pub const P: usize = 4;
pub const TAU: f64 = 27.4;

const SELECTION: [f64; 5] = [-2.5, -0.5, -0.3, -0.5, -0.4];

/// Independent random substreams of a replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Covariates = 0,
    Selection = 1,
    Treatment = 2,
    Noise = 3,
    ObservationalCovariates = 4,
    ObservationalTreatment = 5,
    ObservationalNoise = 6,
    Latent = 7,
    ObservationalLatent = 8,
    Bootstrap = 9,
}

/// ChaCha8 generator for (seed, replicate, substream).
pub fn stream(seed: u64, replicate: u64, sub: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replicate << 8) | sub as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Scenario {
    S1Correct,
    S2MisSampling,
    S2MisOutcome,
    S2MisBoth,
    StrongShift,
    Homogeneous,
    HiddenModifier,
    Nested,
    ConfoundedObs,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::S1Correct,
        Scenario::S2MisSampling,
        Scenario::S2MisOutcome,
        Scenario::S2MisBoth,
        Scenario::StrongShift,
        Scenario::Homogeneous,
        Scenario::HiddenModifier,
        Scenario::Nested,
        Scenario::ConfoundedObs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1Correct => "s1",
            Scenario::S2MisSampling => "s2samp",
            Scenario::S2MisOutcome => "s2out",
            Scenario::S2MisBoth => "s2both",
            Scenario::StrongShift => "strong-shift",
            Scenario::Homogeneous => "homogeneous",
            Scenario::HiddenModifier => "hidden-modifier",
            Scenario::Nested => "nested",
            Scenario::ConfoundedObs => "confounded",
        }
    }

    fn misspecified_sampling(self) -> bool {
        matches!(self, Scenario::S2MisSampling | Scenario::S2MisBoth)
    }

    fn misspecified_outcome(self) -> bool {
        matches!(self, Scenario::S2MisOutcome | Scenario::S2MisBoth)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.to_ascii_lowercase().replace('_', "-");
        let found = Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == t)
            .or(match t.as_str() {
                "s1correct" | "s1-correct" => Some(Scenario::S1Correct),
                "s2missampling" | "s2-sampling" => Some(Scenario::S2MisSampling),
                "s2misoutcome" | "s2-outcome" => Some(Scenario::S2MisOutcome),
                "s2misboth" | "s2-both" => Some(Scenario::S2MisBoth),
                "strongshift" | "strong" => Some(Scenario::StrongShift),
                "hidden" | "hiddenmodifier" => Some(Scenario::HiddenModifier),
                "confoundedobs" | "confounded-obs" => Some(Scenario::ConfoundedObs),
                _ => None,
            });
        found.ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Size of the superpopulation the trial is selected from.
    pub superpopulation: usize,
    /// Observational sample size (non-nested designs).
    pub m: usize,
    pub seed: u64,
    pub replicate: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let superpopulation = if scenario == Scenario::ConfoundedObs {
            100_000
        } else {
            50_000
        };
        Self {
            scenario,
            superpopulation,
            m: 10_000,
            seed,
            replicate: 0,
        }
    }

    pub fn replicate(mut self, r: u64) -> Self {
        self.replicate = r;
        self
    }

    fn rng(&self, sub: Substream) -> ChaCha8Rng {
        stream(self.seed, self.replicate, sub)
    }
}

/// Logit of the trial selection score.
pub fn selection_logit(scenario: Scenario, x: &[f64]) -> f64 {
    if scenario.misspecified_sampling() {
        SELECTION[0] + (0..P).map(|j| SELECTION[j + 1] * x[j].exp()).sum::<f64>() + 3.0
    } else {
        let mut c = SELECTION;
        if scenario == Scenario::StrongShift {
            c[1] = -1.5;
        }
        c[0] + (0..P).map(|j| c[j + 1] * x[j]).sum::<f64>()
    }
}

/// E[Y(a) | X = x] (without the latent confounder for `ConfoundedObs`).
pub fn outcome_mean(scenario: Scenario, a: f64, x: &[f64]) -> f64 {
    match scenario {
        Scenario::Homogeneous => -100.0 + x[0] + 13.7 * (x[1] + x[2] + x[3]) + TAU * a,
        Scenario::ConfoundedObs => a * (1.0 + x[0]),
        s if s.misspecified_outcome() => {
            -100.0 + TAU * a * x[0] * x[1] + 13.7 * (x[1] + x[2] + x[3])
        }
        _ => -100.0 + TAU * a * x[0] + 13.7 * (x[1] + x[2] + x[3]),
    }
}

const CONFOUNDED_NOISE_SD: f64 = 0.5;
const CONFOUNDED_U_OUTCOME: f64 = 2.0;
const CONFOUNDED_U_TREATMENT: f64 = 0.5;

/// Observational treatment probability in the nested cohort.
fn cohort_propensity(x: &[f64]) -> f64 {
    expit(0.3 * x[0] - 0.3)
}

fn covariates(rng: &mut ChaCha8Rng, rows: usize) -> Vec<f64> {
    (0..rows * P)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws one dataset for the configured scenario and replicate.
pub fn generate(cfg: &ScenarioConfig) -> Result<CombinedDataset> {
    let sc = cfg.scenario;
    let pop = covariates(&mut cfg.rng(Substream::Covariates), cfg.superpopulation);
    let mut sel_rng = cfg.rng(Substream::Selection);
    let selected: Vec<bool> = pop
        .chunks(P)
        .map(|x| {
            let u: f64 = sel_rng.random();
            u < expit(selection_logit(sc, x))
        })
        .collect();
    let mut trt = cfg.rng(Substream::Treatment);
    let mut noise = cfg.rng(Substream::Noise);
    let mut latent = cfg.rng(Substream::Latent);
    let nsd = if sc == Scenario::ConfoundedObs {
        CONFOUNDED_NOISE_SD
    } else {
        1.0
    };

    let mut cov = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut source = Vec::new();

    if sc == Scenario::Nested {
        let mut order: Vec<usize> = (0..cfg.superpopulation).filter(|&i| selected[i]).collect();
        order.extend((0..cfg.superpopulation).filter(|&i| !selected[i]));
        for i in order {
            let x = &pop[i * P..(i + 1) * P];
            let p = if selected[i] {
                0.5
            } else {
                cohort_propensity(x)
            };
            let a = u8::from(trt.random::<f64>() < p);
            let eps: f64 = noise.sample(StandardNormal);
            cov.extend_from_slice(x);
            treatment.push(Some(a));
            outcome.push(Some(outcome_mean(sc, f64::from(a), x) + eps));
            source.push(if selected[i] {
                Source::Trial
            } else {
                Source::Observational
            });
        }
        return CombinedDataset::new(
            cov,
            P,
            treatment,
            outcome,
            source,
            Design::Nested,
            TrialPropensity::Constant(0.5),
        );
    }

    for (i, x) in pop.chunks(P).enumerate() {
        // Latent and noise draws are consumed for every unit so that the
        // streams stay aligned across scenarios.
        let u: f64 = latent.sample(StandardNormal);
        let eps: f64 = noise.sample(StandardNormal);
        let coin: f64 = trt.random();
        if !selected[i] {
            continue;
        }
        let a = u8::from(coin < 0.5);
        let mut y = outcome_mean(sc, f64::from(a), x) + nsd * eps;
        if sc == Scenario::ConfoundedObs && a == 0 {
            y += CONFOUNDED_U_OUTCOME * u;
        }
        cov.extend_from_slice(x);
        treatment.push(Some(a));
        outcome.push(Some(y));
        source.push(Source::Trial);
    }

    let obs = covariates(&mut cfg.rng(Substream::ObservationalCovariates), cfg.m);
    let mut otrt = cfg.rng(Substream::ObservationalTreatment);
    let mut onoise = cfg.rng(Substream::ObservationalNoise);
    let mut olatent = cfg.rng(Substream::ObservationalLatent);
    for x in obs.chunks(P) {
        cov.extend_from_slice(x);
        source.push(Source::Observational);
        if sc == Scenario::ConfoundedObs {
            let u: f64 = olatent.sample(StandardNormal);
            let a = u8::from(otrt.random::<f64>() < expit(CONFOUNDED_U_TREATMENT * u));
            let eps: f64 = onoise.sample(StandardNormal);
            let mut y = outcome_mean(sc, f64::from(a), x) + CONFOUNDED_NOISE_SD * eps;
            if a == 0 {
                y += CONFOUNDED_U_OUTCOME * u;
            }
            treatment.push(Some(a));
            outcome.push(Some(y));
        } else {
            treatment.push(None);
            outcome.push(None);
        }
    }
    CombinedDataset::new(
        cov,
        P,
        treatment,
        outcome,
        source,
        Design::NonNested,
        TrialPropensity::Constant(0.5),
    )
}

/// Target-population ATE.
pub fn true_ate(scenario: Scenario) -> f64 {
    match scenario {
        // E[1 + X₁] with X₁ ~ N(1, 1).
        Scenario::ConfoundedObs => 2.0,
        // E[X₁X₂] = E[X₁]E[X₂] = 1 under independence.
        _ => TAU,
    }
}

/// Standard normal density.
fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// ∫ f(z) φ(z) dz by composite Simpson on [−12, 12].
fn gauss_expect(f: impl Fn(f64) -> f64) -> f64 {
    let k = 24_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / k as f64;
    let mut s = 0.0;
    for i in 0..=k {
        let z = lo + h * i as f64;
        let w = if i == 0 || i == k {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * f(z) * phi(z);
    }
    s * h / 3.0
}

/// E[X₁ | S = 1] under a linear-Gaussian selection logit.
///
/// With η = c₀ + Σ cⱼXⱼ Gaussian, E[X₁ | η] is linear in η, so the trial
/// mean reduces to one-dimensional integrals over η.
fn trial_mean_x1(c: &[f64; 5]) -> f64 {
    let mu = c[0] + c[1..].iter().sum::<f64>();
    let var: f64 = c[1..].iter().map(|v| v * v).sum();
    let sd = var.sqrt();
    let slope = c[1] / var;
    let num = gauss_expect(|z| expit(mu + sd * z) * (1.0 + slope * sd * z));
    let den = gauss_expect(|z| expit(mu + sd * z));
    num / den
}

/// Trial-population ATE τ₁ = E[τ(X) | S = 1] for scenarios with a linear
/// selection logit and τ(x) = 27.4 x₁ (S1, hidden modifier, strong shift,
/// nested).
pub fn trial_ate(scenario: Scenario) -> Result<f64> {
    let mut c = SELECTION;
    match scenario {
        Scenario::S1Correct | Scenario::HiddenModifier | Scenario::Nested => {}
        Scenario::StrongShift => c[1] = -1.5,
        Scenario::Homogeneous => return Ok(TAU),
        other => {
            return Err(Error::Unsupported(format!(
                "no closed-form trial effect for {other}"
            )))
        }
    }
    Ok(TAU * trial_mean_x1(&c))
}

/// E[Y(0) | A = 0] − E[Y(0)] in the confounded observational sample: the
/// bias of a naive observational contrast.
pub fn confounding_bias() -> f64 {
    let b = CONFOUNDED_U_OUTCOME;
    let g = CONFOUNDED_U_TREATMENT;
    let p0 = gauss_expect(|u| 1.0 - expit(g * u));
    let eu0 = gauss_expect(|u| u * (1.0 - expit(g * u))) / p0;
    // Naive contrast: E[Y(1)|A=1] − E[Y(0)|A=0] = τ − b E[U | A = 0].
    -b * eu0
}
