//! Stratified nonparametric bootstrap: trial and observational rows are
//! resampled separately so that n and m stay fixed.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::CombinedDataset;
use crate::dgp::{stream, Substream};
use crate::error::{Error, Result};
use crate::weights::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub point: f64,
    /// 2.5% percentile of the replicate estimates.
    pub lower: f64,
    /// 97.5% percentile of the replicate estimates.
    pub upper: f64,
    pub b: usize,
    pub seed: u64,
    /// Replicates whose estimator returned an error.
    pub failures: usize,
}

/// Percentile bootstrap CI for `estimator`.
///
/// Rows are first put in canonical order within each source, so the result
/// depends only on the multiset of rows per source. Replicate r draws its
/// indices from the (seed, r) substream; every nuisance model is refitted
/// inside the estimator call. Failing replicates are counted and skipped.
pub fn stratified_bootstrap<F>(
    ds: &CombinedDataset,
    estimator: F,
    b: usize,
    seed: u64,
) -> Result<EstimateWithCI>
where
    F: Fn(&CombinedDataset) -> Result<f64> + Sync,
{
    if b < 2 {
        return Err(Error::TooFewReplicates(b));
    }
    let canon = ds.canonicalized()?;
    let point = estimator(&canon)?;
    let trial = canon.trial_rows();
    let target = canon.target_rows();
    let results: Vec<Result<f64>> = (0..b as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, r, Substream::Bootstrap);
            let mut rows = Vec::with_capacity(canon.rows());
            rows.extend((0..trial.len()).map(|_| trial[rng.random_range(0..trial.len())]));
            rows.extend((0..target.len()).map(|_| target[rng.random_range(0..target.len())]));
            let boot = canon.select_rows(&rows)?;
            estimator(&boot)
        })
        .collect();
    let mut values = Vec::with_capacity(b);
    let mut last_error = None;
    for r in results {
        match r {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => last_error = Some(Error::InvalidData("non-finite replicate".into())),
            Err(e) => last_error = Some(e),
        }
    }
    if values.is_empty() {
        return Err(Error::AllReplicatesFailed(
            last_error.map_or_else(String::new, |e| e.to_string()),
        ));
    }
    values.sort_by(f64::total_cmp);
    Ok(EstimateWithCI {
        point,
        lower: quantile_sorted(&values, 0.025),
        upper: quantile_sorted(&values, 0.975),
        b,
        seed,
        failures: b - values.len(),
    })
}
