//! End-to-end privatization pipeline behind the `capriv` binary.
//!
//! [`run_pipeline`] loads or synthesizes data, fits the chosen release mechanism on
//! the training rows, applies it to every row, attacks the release, audits it with
//! mutual-information estimates and writes the released CSV plus a JSON
//! [`PrivacyReport`].

use std::path::PathBuf;

pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;

pub use config::{AuditConfig, Mechanism, OutputConfig, PipelineConfig, SyntheticSpec};
pub use pipeline::{prepare, run_pipeline, run_sweep, synthesize, Prepared, RunOutput};
pub use report::{emit_report, AttackerMetrics, PrivacyReport, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "distortion budget gamma = {gamma} is below the minimum feasible distortion {min_gamma} \
         for rank {k}; choose gamma >= {min_gamma}"
    )]
    Infeasible { gamma: f64, min_gamma: f64, k: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(capriv::Error),
}

impl From<capriv::Error> for CliError {
    fn from(e: capriv::Error) -> Self {
        match e {
            capriv::Error::InfeasibleDistortion { gamma, min_gamma, k } => CliError::Infeasible { gamma, min_gamma, k },
            other => CliError::Core(other),
        }
    }
}

pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use capriv::Error as E;
        match self {
            CliError::Config(_) | CliError::Input { .. } => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Infeasible { .. } => EXIT_INFEASIBLE,
            CliError::Numeric(_) => EXIT_NONCONVERGENCE,
            CliError::Core(e) => match e {
                E::InvalidInput(_) | E::NonFinite(_) | E::ClassTooSmall { .. } | E::DegenerateSample { .. } => {
                    EXIT_VALIDATION
                }
                E::InfeasibleDistortion { .. } => EXIT_INFEASIBLE,
                E::NonConvergence { .. }
                | E::SingularCompression { .. }
                | E::RankNotAttained { .. }
                | E::BracketFailure
                | E::Decomposition => EXIT_NONCONVERGENCE,
            },
        }
    }
}
