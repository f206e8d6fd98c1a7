//! Combined trial + observational datasets.
//!
//! Rows keep their file order. `Source::Trial` rows are the randomized sample
//! (S = 1); `Source::Observational` rows describe the target population. In
//! a nested design the observational rows are the non-randomized members of
//! the same cohort (S = 0).

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::weights::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Source {
    Trial,
    Observational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Design {
    /// Trial and target sample drawn separately; only the odds of trial
    /// membership are estimable.
    NonNested,
    /// Trial embedded in a cohort; S is observed for every row.
    Nested,
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(Design::Nested),
            "non-nested" | "nonnested" => Ok(Design::NonNested),
            other => Err(Error::InvalidData(format!("unknown design `{other}`"))),
        }
    }
}

/// Treatment probability inside the trial, known by design.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialPropensity {
    Constant(f64),
    /// One value per dataset row; entries of observational rows are ignored.
    PerRow(Vec<f64>),
}

impl Default for TrialPropensity {
    fn default() -> Self {
        TrialPropensity::Constant(0.5)
    }
}

/// Validated container for the stacked trial and observational samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDataset {
    p: usize,
    covariates: Vec<f64>,
    treatment: Vec<Option<u8>>,
    outcome: Vec<Option<f64>>,
    source: Vec<Source>,
    design: Design,
    e1: TrialPropensity,
    names: Vec<String>,
    trial: Vec<usize>,
    target: Vec<usize>,
}

impl CombinedDataset {
    /// Builds a dataset from row-major covariates (`rows × p`) and per-row
    /// treatment, outcome and source, checking every structural invariant.
    pub fn new(
        covariates: Vec<f64>,
        p: usize,
        treatment: Vec<Option<u8>>,
        outcome: Vec<Option<f64>>,
        source: Vec<Source>,
        design: Design,
        e1: TrialPropensity,
    ) -> Result<Self> {
        let names = (1..=p).map(|j| format!("X{j}")).collect();
        Self::with_names(covariates, names, treatment, outcome, source, design, e1)
    }

    pub fn with_names(
        covariates: Vec<f64>,
        names: Vec<String>,
        treatment: Vec<Option<u8>>,
        outcome: Vec<Option<f64>>,
        source: Vec<Source>,
        design: Design,
        e1: TrialPropensity,
    ) -> Result<Self> {
        let p = names.len();
        if p == 0 {
            return Err(Error::NoCovariates);
        }
        let rows = source.len();
        if covariates.len() != rows * p || treatment.len() != rows || outcome.len() != rows {
            return Err(Error::InvalidData(format!(
                "column lengths disagree: {} covariate cells for {rows} rows × {p}, {} treatments, {} outcomes",
                covariates.len(),
                treatment.len(),
                outcome.len()
            )));
        }
        if let TrialPropensity::PerRow(v) = &e1 {
            if v.len() != rows {
                return Err(Error::InvalidData("per-row e1 length mismatch".into()));
            }
        }
        for (i, chunk) in covariates.chunks(p).enumerate() {
            if let Some(j) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCovariate {
                    row: i + 1,
                    column: names[j].clone(),
                });
            }
        }
        let mut trial = Vec::new();
        let mut target = Vec::new();
        for (i, s) in source.iter().enumerate() {
            match s {
                Source::Trial => trial.push(i),
                Source::Observational => target.push(i),
            }
            match treatment[i] {
                None if *s == Source::Trial => {
                    return Err(Error::MissingTreatmentInTrial { row: i + 1 })
                }
                Some(a) if a > 1 => {
                    return Err(Error::NonBinaryTreatment {
                        row: i + 1,
                        value: a.to_string(),
                    })
                }
                _ => {}
            }
            match outcome[i] {
                None if *s == Source::Trial => {
                    return Err(Error::MissingOutcomeInTrial { row: i + 1 })
                }
                Some(y) if !y.is_finite() => {
                    return Err(Error::InvalidData(format!(
                        "row {}: outcome not finite",
                        i + 1
                    )))
                }
                _ => {}
            }
            let e = match &e1 {
                TrialPropensity::Constant(c) => *c,
                TrialPropensity::PerRow(v) => v[i],
            };
            if *s == Source::Trial && !(e > 0.0 && e < 1.0) {
                return Err(Error::InvalidData(format!(
                    "row {}: e1 = {e} outside (0,1)",
                    i + 1
                )));
            }
        }
        if !trial.iter().any(|&i| treatment[i] == Some(1)) {
            return Err(Error::EmptyArm("treated"));
        }
        if !trial.iter().any(|&i| treatment[i] == Some(0)) {
            return Err(Error::EmptyArm("control"));
        }
        if target.is_empty() {
            return Err(Error::EmptyTargetSample);
        }
        Ok(Self {
            p,
            covariates,
            treatment,
            outcome,
            source,
            design,
            e1,
            names,
            trial,
            target,
        })
    }

    /// Trial sample size n.
    pub fn n(&self) -> usize {
        self.trial.len()
    }

    /// Observational (target) sample size m.
    pub fn m(&self) -> usize {
        self.target.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn trial_rows(&self) -> &[usize] {
        &self.trial
    }

    pub fn target_rows(&self) -> &[usize] {
        &self.target
    }

    pub fn x(&self, row: usize) -> &[f64] {
        &self.covariates[row * self.p..(row + 1) * self.p]
    }

    pub fn treatment(&self, row: usize) -> Option<u8> {
        self.treatment[row]
    }

    pub fn outcome(&self, row: usize) -> Option<f64> {
        self.outcome[row]
    }

    pub fn source(&self, row: usize) -> Source {
        self.source[row]
    }

    pub fn e1(&self, row: usize) -> f64 {
        match &self.e1 {
            TrialPropensity::Constant(c) => *c,
            TrialPropensity::PerRow(v) => v[row],
        }
    }

    pub fn trial_propensity(&self) -> &TrialPropensity {
        &self.e1
    }

    /// Treatment of a trial row as 0.0/1.0. Trial rows always carry one.
    pub fn a(&self, row: usize) -> f64 {
        f64::from(self.treatment[row].expect("trial rows carry a treatment"))
    }

    /// Outcome of a row known to carry one.
    pub fn y(&self, row: usize) -> f64 {
        self.outcome[row].expect("row carries an outcome")
    }

    /// Covariate matrix restricted to `rows`, row-major.
    pub fn design_rows(&self, rows: &[usize]) -> Vec<&[f64]> {
        rows.iter().map(|&i| self.x(i)).collect()
    }

    /// True when every observational row also carries treatment and outcome.
    pub fn target_fully_observed(&self) -> bool {
        self.target
            .iter()
            .all(|&i| self.treatment[i].is_some() && self.outcome[i].is_some())
    }

    /// New dataset made of the given rows, in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut cov = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            cov.extend_from_slice(self.x(i));
        }
        let e1 = match &self.e1 {
            TrialPropensity::Constant(c) => TrialPropensity::Constant(*c),
            TrialPropensity::PerRow(v) => {
                TrialPropensity::PerRow(rows.iter().map(|&i| v[i]).collect())
            }
        };
        Self::with_names(
            cov,
            self.names.clone(),
            rows.iter().map(|&i| self.treatment[i]).collect(),
            rows.iter().map(|&i| self.outcome[i]).collect(),
            rows.iter().map(|&i| self.source[i]).collect(),
            self.design,
            e1,
        )
    }

    /// Keeps only the covariate columns listed in `columns`.
    pub fn project_covariates(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::NoCovariates);
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.p) {
            return Err(Error::InvalidData(format!(
                "covariate column {bad} out of range"
            )));
        }
        let mut cov = Vec::with_capacity(self.rows() * columns.len());
        for i in 0..self.rows() {
            let x = self.x(i);
            cov.extend(columns.iter().map(|&c| x[c]));
        }
        let mut out = self.clone();
        out.p = columns.len();
        out.covariates = cov;
        out.names = columns.iter().map(|&c| self.names[c].clone()).collect();
        Ok(out)
    }

    /// Same rows sorted within each source (trial block first) by a total
    /// order on the row contents; the result depends only on the multiset
    /// of rows per source.
    pub fn canonicalized(&self) -> Result<Self> {
        let key = |i: usize| -> Vec<u64> {
            let mut k: Vec<u64> = self.x(i).iter().map(|v| v.to_bits()).collect();
            k.push(self.treatment[i].map_or(u64::MAX, u64::from));
            k.push(self.outcome[i].map_or(u64::MAX, f64::to_bits));
            k
        };
        let mut t = self.trial.clone();
        let mut o = self.target.clone();
        t.sort_by_key(|&i| key(i));
        o.sort_by_key(|&i| key(i));
        t.extend(o);
        self.select_rows(&t)
    }

    pub fn with_design(mut self, design: Design) -> Self {
        self.design = design;
        self
    }

    /// Writes the standard `S,A,Y,X1..Xp` CSV layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["S".to_string(), "A".to_string(), "Y".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::Csv(e.to_string()))?;
        for i in 0..self.rows() {
            let s = match (self.source[i], self.design) {
                (Source::Trial, _) => "1".to_string(),
                (Source::Observational, Design::Nested) => "0".to_string(),
                (Source::Observational, Design::NonNested) => NA.to_string(),
            };
            let mut rec = vec![
                s,
                self.treatment[i].map_or(NA.to_string(), |a| a.to_string()),
                self.outcome[i].map_or(NA.to_string(), |y| y.to_string()),
            ];
            rec.extend(self.x(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io(e.to_string()))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

const NA: &str = "NA";

fn is_na(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == NA
}

/// Column-name mapping for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct Schema {
    pub selection: String,
    pub treatment: String,
    pub outcome: String,
    /// Covariate columns; `None` takes every remaining column in file order.
    pub covariates: Option<Vec<String>>,
    /// Forces the design instead of inferring it from the S column.
    pub design: Option<Design>,
    pub e1: TrialPropensity,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            selection: "S".into(),
            treatment: "A".into(),
            outcome: "Y".into(),
            covariates: None,
            design: None,
            e1: TrialPropensity::default(),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<CombinedDataset> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_dataset(f, schema)
}

/// Parses CSV text. `NA` and empty cells are missing values.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<CombinedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let s_col = col(&schema.selection)?;
    let a_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| ![s_col, a_col, y_col].contains(j))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(Error::NoCovariates);
    }
    let cov_cols = cov_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;

    let mut s_raw = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut covariates = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        let s = cell(s_col);
        s_raw.push(if is_na(s) {
            None
        } else {
            match s.parse::<f64>() {
                Ok(1.0) => Some(true),
                Ok(0.0) => Some(false),
                _ => {
                    return Err(Error::BadSelectionIndicator {
                        row,
                        value: s.to_string(),
                    })
                }
            }
        });
        let a = cell(a_col);
        treatment.push(if is_na(a) {
            None
        } else {
            match a.parse::<f64>() {
                Ok(1.0) => Some(1u8),
                Ok(0.0) => Some(0u8),
                _ => {
                    return Err(Error::NonBinaryTreatment {
                        row,
                        value: a.to_string(),
                    })
                }
            }
        });
        let y = cell(y_col);
        outcome.push(if is_na(y) {
            None
        } else {
            Some(
                y.parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("row {row}: bad outcome `{y}`")))?,
            )
        });
        for (k, &j) in cov_cols.iter().enumerate() {
            let v = cell(j);
            match v.parse::<f64>() {
                Ok(x) if !is_na(v) && x.is_finite() => covariates.push(x),
                _ => {
                    return Err(Error::NonFiniteCovariate {
                        row,
                        column: cov_names[k].clone(),
                    })
                }
            }
        }
    }

    let design = schema.design.unwrap_or_else(|| {
        if s_raw.iter().any(Option::is_none) {
            Design::NonNested
        } else if s_raw.contains(&Some(false)) {
            Design::Nested
        } else {
            Design::NonNested
        }
    });
    let mut source = Vec::with_capacity(s_raw.len());
    for (r, s) in s_raw.iter().enumerate() {
        source.push(match (s, design) {
            (Some(true), _) => Source::Trial,
            (Some(false), _) => Source::Observational,
            (None, Design::NonNested) => Source::Observational,
            (None, Design::Nested) => {
                return Err(Error::BadSelectionIndicator {
                    row: r + 1,
                    value: NA.into(),
                })
            }
        });
    }
    CombinedDataset::with_names(
        covariates,
        cov_names,
        treatment,
        outcome,
        source,
        design,
        schema.e1.clone(),
    )
}

/// Positivity diagnostic for odds weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub min_odds: f64,
    pub max_odds: f64,
    /// Largest inverse odds `1 / α̂`.
    pub max_weight: f64,
    pub threshold: f64,
    /// Trial rows (dataset indices) whose inverse odds exceed the threshold.
    pub flagged: Vec<usize>,
}

impl OverlapReport {
    pub fn flagged_count(&self) -> usize {
        self.flagged.len()
    }
}

/// Reports extreme selection odds: trial units whose inverse-odds weight
/// `1 / α̂(x)` exceeds `threshold` are flagged.
pub fn validate_overlap(
    ds: &CombinedDataset,
    alpha: &WeightVector,
    threshold: f64,
) -> OverlapReport {
    let mut min_odds = f64::INFINITY;
    let mut max_odds = f64::NEG_INFINITY;
    let mut max_weight = 0.0f64;
    let mut flagged = Vec::new();
    for (&row, &odds) in ds.trial_rows().iter().zip(alpha.values()) {
        min_odds = min_odds.min(odds);
        max_odds = max_odds.max(odds);
        let w = 1.0 / odds;
        max_weight = max_weight.max(w);
        if w > threshold {
            flagged.push(row);
        }
    }
    OverlapReport {
        min_odds,
        max_odds,
        max_weight,
        threshold,
        flagged,
    }
}
