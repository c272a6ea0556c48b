use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents do not line up.
    Dimension { op: &'static str, detail: String },
    /// A softmax or normalization row has no admissible mass (all `-inf`, or zero sum).
    DegenerateRow { op: &'static str, row: usize },
    /// Batch normalization in train mode needs at least two rows.
    InsufficientBatch { rows: usize },
    /// Class label outside `[0, classes)`.
    Label { label: usize, classes: usize },
    /// Backward was asked to start from a non-scalar.
    Rank { numel: usize },
    /// A forward op produced NaN or an infinity from finite inputs.
    NonFinite { op: &'static str },
    /// Downsampling factor is not an integer, or the length is not a multiple of it.
    Ratio { fs: u32, target_fs: u32, len: usize },
    /// Circular shift amplitude is not smaller than the segment length.
    Shift { max_shift: usize, len: usize },
    /// Invalid configuration value.
    Config(String),
    /// Input outside the domain of an operation (e.g. negative attention mass).
    Domain(String),
    /// A CAT/head pair carries no attention mass over channel tokens.
    DegenerateCat { pair: usize, cat: usize, head: usize },
    /// Invalid call argument.
    Argument(String),
    /// A NaN gradient reached the optimizer.
    PoisonedState { param: String },
    /// A step ran without the artifacts an earlier step should have produced.
    Workflow(String),
    /// Channel padding target is smaller than an input's channel count.
    Padding { pad_to: usize, channels: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::DegenerateRow { op, row } => {
                write!(f, "degenerate row {row} in {op}: no admissible entries")
            }
            Error::InsufficientBatch { rows } => {
                write!(f, "batch normalization in train mode needs >= 2 rows, got {rows}")
            }
            Error::Label { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::Rank { numel } => write!(f, "backward needs a scalar loss, got {numel} elements"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Ratio { fs, target_fs, len } => write!(
                f,
                "cannot downsample {len} samples from {fs} Hz to {target_fs} Hz with an integer block size"
            ),
            Error::Shift { max_shift, len } => {
                write!(f, "max shift {max_shift} must be smaller than segment length {len}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::DegenerateCat { pair, cat, head } => write!(
                f,
                "CAT {cat} head {head} (pair {pair}) has no attention mass on channel tokens"
            ),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::PoisonedState { param } => write!(f, "NaN gradient for parameter {param}"),
            Error::Workflow(msg) => write!(f, "workflow error: {msg}"),
            Error::Padding { pad_to, channels } => {
                write!(f, "cannot pad {channels} channels to {pad_to}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
