//! Configuration-driven experiment runner: loads a JSON experiment config,
//! drives the attack → train → measure → defend pipelines, and emits JSON
//! and CSV reports.

pub mod config;
pub mod pipeline;
pub mod reports;

pub use config::{load_config, ExperimentConfig};
pub use pipeline::{run_attack_pipeline, run_fig2_scenario, run_theory};
pub use reports::{emit_reports, load_report, RunReport};

/// Anything the runner can fail with; each variant maps to a stable `kind`
/// string in the CLI's error JSON.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] subpop_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv write error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Stable machine-readable error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Core(e) => core_kind(e),
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
            Self::Usage(_) => "usage",
        }
    }
}

fn core_kind(e: &subpop_core::Error) -> &'static str {
    use subpop_core::Error as E;
    match e {
        E::CsvRead(_) => "csv-read",
        E::CsvSchema(_) => "csv-schema",
        E::CsvValue { .. } => "csv-value",
        E::UnknownLabel { .. } => "unknown-label",
        E::InvalidArgument(_) => "invalid-argument",
        E::InvalidSplit(_) => "invalid-split",
        E::DivergentTraining { .. } => "divergent-training",
        E::UnknownTag(_) => "unknown-tag",
        E::EmptySubpopulation(_) => "empty-subpopulation",
        E::UnsupportedArchitecture(_) => "unsupported-architecture",
        E::CgDidNotConverge { .. } => "cg-did-not-converge",
        E::NonPositiveDefiniteHessian(_) => "non-positive-definite-hessian",
        E::MissingBounds => "missing-bounds",
        E::InvalidMixture(_) => "invalid-mixture",
        E::Json(_) => "json",
        E::Io(_) => "io",
    }
}
