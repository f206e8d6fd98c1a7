use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: treatment value `{value}` is not 0/1")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("row {row}, column `{column}`: covariate is missing or not finite")]
    NonFiniteCovariate { row: usize, column: String },
    #[error("row {row}: trial unit has no outcome")]
    MissingOutcomeInTrial { row: usize },
    #[error("row {row}: trial unit has no treatment")]
    MissingTreatmentInTrial { row: usize },
    #[error("row {row}: invalid selection indicator `{value}` (0/1, or NA in non-nested data)")]
    BadSelectionIndicator { row: usize, value: String },
    #[error("trial has no {0} units")]
    EmptyArm(&'static str),
    #[error("no target (observational) rows")]
    EmptyTargetSample,
    #[error("dataset has no covariates")]
    NoCovariates,
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),

    #[error("logistic fit needs both label classes")]
    SingleClass,
    #[error("logistic fit diverged (separation, coefficient norm {norm:.3e})")]
    Diverged { norm: f64 },
    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
    },
    #[error("not enough rows ({rows}) for {params} parameters")]
    TooFewRows { rows: usize, params: usize },
    #[error("sampling-score fit needs observational rows")]
    NoObservationalRows,
    #[error("unknown moment specification `{0}`")]
    BadMomentSpec(String),

    #[error("calibration target lies outside the convex hull of trial moments")]
    Infeasible,
    #[error("trial moment matrix is rank deficient")]
    RankDeficientMoments,
    #[error("stratum {stratum} has no {what}")]
    EmptyStratum { stratum: usize, what: &'static str },
    #[error("weights of the {0} arm sum to zero")]
    ZeroWeightSum(&'static str),
    #[error("operation requires a nested design")]
    NotNested,
    #[error("operation requires a non-nested design")]
    NotNonNested,
    #[error("row {row}: treatment/outcome must be observed for every unit")]
    MissingTreatmentOutcome { row: usize },
    #[error("{0}")]
    Unsupported(String),

    #[error("every bootstrap replicate failed (last error: {0})")]
    AllReplicatesFailed(String),
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("graph contains a cycle through `{0}`")]
    CycleDetected(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("line {line}: cannot parse `{text}`")]
    Parse { line: usize, text: String },
    #[error("diagram has no selection node")]
    NoSelectionNode,
    #[error("diagram has no {0} node")]
    MissingRole(&'static str),
    #[error("joint state space of {0} states is too large")]
    DomainTooLarge(u128),
}

pub type Result<T> = std::result::Result<T, Error>;
