use kpinr_core::CoreError;
use kpinr_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "k-t GRAPPA calibration underdetermined for offset class {class}: {rows} equations for {unknowns} \
         unknowns; at least {required_acs} ACS lines are needed (have {acs_lines})"
    )]
    Underdetermined { class: String, rows: usize, unknowns: usize, required_acs: usize, acs_lines: usize },
    #[error("calibration solve failed: {0}")]
    Solve(String),
    #[error("L+S iterates diverged: objective rose for {streak} consecutive iterations (last {last:.6e})")]
    Diverged { streak: usize, last: f64 },
}

pub type Result<T> = std::result::Result<T, BaselineError>;
