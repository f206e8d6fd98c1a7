//! Estimators for generalizing randomized-trial treatment effects to a
//! target population, with graphical identification tools and simulation
//! scenarios.

pub mod bench;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod nuisance;
pub mod scm;
pub mod variance;
pub mod weights;

pub use data::{
    load_dataset, read_dataset, validate_overlap, CombinedDataset, Design, OverlapReport, Schema,
    Source, TrialPropensity,
};
pub use error::{Error, Result};
