//! Error type shared by every module of the engine.

use std::fmt;

pub type Result<T> = std::result::Result<T, CclError>;

/// All failure modes of the engine.
#[derive(Debug)]
pub enum CclError {
    /// A row to be normalized (or a pre-normalization encoder output) has
    /// vanishing norm.
    DegenerateEmbedding,
    /// Softmax or contrastive temperature is not strictly positive.
    InvalidTemperature,
    /// Matrix shapes do not line up for the requested operation.
    DimensionMismatch { expected: String, got: String },
    /// A predicted probability is too small to take a log of.
    LogUnderflow,
    /// Variance over augmented views needs at least two rows.
    NeedTwoViews,
    /// The objective handed to the finite-difference oracle returned a
    /// non-finite value.
    ObjectiveNotFinite,
    /// An encoder architecture with no layers.
    EmptyArchitecture,
    /// Cotangent passed to backward does not match the embedding shape.
    GradientShapeMismatch { expected: String, got: String },
    /// Two encoders that must share an architecture do not.
    ArchitectureMismatch,
    /// Optimizer received a non-finite gradient.
    NonFiniteGradient,
    /// Training produced a non-finite total loss.
    Diverged { task: usize, epoch: usize, step: usize },
    /// A key pushed into a negative queue is not unit norm.
    UnnormalizedKey { row: usize, norm: f64 },
    /// The four embedding batches of the distillation loss disagree in shape.
    BatchMismatch,
    /// k-means asked for more clusters than there are samples.
    KExceedsPopulation { k: usize, samples: usize },
    /// k-means input contains NaN or infinity.
    InvalidFeatures,
    /// Random exemplar selection asked for more samples than exist.
    BudgetExceedsPopulation { budget: usize, population: usize },
    /// More incremental steps than classes.
    TooManySteps { steps: usize, classes: usize },
    /// CSV rows with differing column counts.
    InconsistentDimensions { line: usize },
    /// CSV field that does not parse as a number.
    ParseError { line: usize },
    /// CSV file with no rows.
    EmptyDataset,
    /// Linear probe saw a test class that is absent from its training split.
    ProbeClassMismatch { class: usize },
    /// Forgetting / forward transfer need at least two tasks.
    UndefinedMetric,
    /// Configuration field failed validation. The string names the field.
    Config(String),
    /// Checkpoint file is corrupt or has the wrong magic/architecture.
    Checkpoint(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for CclError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateEmbedding => write!(f, "degenerate embedding"),
            Self::InvalidTemperature => write!(f, "invalid temperature"),
            Self::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Self::LogUnderflow => write!(f, "log underflow"),
            Self::NeedTwoViews => write!(f, "need at least two views"),
            Self::ObjectiveNotFinite => write!(f, "objective not finite"),
            Self::EmptyArchitecture => write!(f, "empty architecture"),
            Self::GradientShapeMismatch { expected, got } => {
                write!(f, "gradient shape mismatch: expected {expected}, got {got}")
            }
            Self::ArchitectureMismatch => write!(f, "architecture mismatch"),
            Self::NonFiniteGradient => write!(f, "diverged: non-finite gradient"),
            Self::Diverged { task, epoch, step } => {
                write!(f, "diverged at task {task}, epoch {epoch}, step {step}")
            }
            Self::UnnormalizedKey { row, norm } => {
                write!(f, "unnormalized key at row {row} (norm {norm})")
            }
            Self::BatchMismatch => write!(f, "batch mismatch"),
            Self::KExceedsPopulation { k, samples } => {
                write!(f, "k exceeds population: k={k}, samples={samples}")
            }
            Self::InvalidFeatures => write!(f, "invalid features"),
            Self::BudgetExceedsPopulation { budget, population } => {
                write!(f, "budget exceeds population: budget={budget}, population={population}")
            }
            Self::TooManySteps { steps, classes } => {
                write!(f, "too many steps: {steps} steps for {classes} classes")
            }
            Self::InconsistentDimensions { line } => {
                write!(f, "inconsistent dimensions at line {line}")
            }
            Self::ParseError { line } => write!(f, "parse error at line {line}"),
            Self::EmptyDataset => write!(f, "empty dataset"),
            Self::ProbeClassMismatch { class } => {
                write!(f, "probe class mismatch: class {class} missing from train split")
            }
            Self::UndefinedMetric => write!(f, "undefined for single task"),
            Self::Config(msg) => write!(f, "invalid config: {msg}"),
            Self::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CclError {}

impl From<std::io::Error> for CclError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
