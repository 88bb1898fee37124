//! Command implementations behind the `ccl` binary.
//!
//! Each command reads a JSON run configuration, drives the core engine, and
//! writes flat artifacts (JSON reports, CSV tables, binary checkpoints) into
//! a run directory. Everything is reproducible from `resolved_config.json`.

pub mod ablate;
pub mod artifacts;
pub mod commands;

use ccl_core::CclError;

/// Process exit code for an error: 2 for configuration and validation
/// problems, 3 for numerical divergence, 1 for I/O and everything else.
pub fn exit_code_for(err: &CclError) -> i32 {
    match err {
        CclError::Config(_)
        | CclError::Checkpoint(_)
        | CclError::TooManySteps { .. }
        | CclError::EmptyDataset
        | CclError::InconsistentDimensions { .. }
        | CclError::ParseError { .. }
        | CclError::KExceedsPopulation { .. }
        | CclError::BudgetExceedsPopulation { .. }
        | CclError::ProbeClassMismatch { .. } => 2,
        CclError::Diverged { .. } | CclError::NonFiniteGradient | CclError::DegenerateEmbedding => 3,
        _ => 1,
    }
}
