use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Layout;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index ({row}, {col}, {band}) out of range for {height}x{width}x{bands} tensor")]
    Index {
        row: usize,
        col: usize,
        band: usize,
        height: usize,
        width: usize,
        bands: usize,
    },

    #[error("layout error: {step} expects {expected:?}, got {actual:?}")]
    Layout {
        step: &'static str,
        expected: Layout,
        actual: Layout,
    },

    #[error("element type error: {0}")]
    ElementType(String),

    #[error("calibration error at pixel ({row}, {col}): flat - dark = {diff:e}")]
    Calibration { row: usize, col: usize, diff: f32 },

    #[error("degenerate channel {band}: min = max = {value}")]
    DegenerateChannel { band: usize, value: f32 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("label error: {0}")]
    Label(String),

    #[error("graph structure error: {0}")]
    Structure(String),

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("infeasible pruning target: FLOPS ratio {target:.4} requested, best achievable {achievable:.4}")]
    Infeasible { target: f64, achievable: f64 },

    #[error("pruning iteration failed: {0}")]
    Iteration(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("quantization error: {0}")]
    Quantization(String),

    #[error("pipeline failure at frame {frame}: {message}")]
    Pipeline { frame: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    /// Short, stable category tag used by the CLI for machine-parseable errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Index { .. } => "dimension",
            Error::Layout { .. } | Error::ElementType(_) => "layout",
            Error::Calibration { .. } => "calibration",
            Error::DegenerateChannel { .. } => "degenerate",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Label(_) => "label",
            Error::Structure(_) => "structure",
            Error::Scheme(_) => "scheme",
            Error::Infeasible { .. } => "infeasible",
            Error::Iteration(_) => "iteration",
            Error::Training(_) => "training",
            Error::Quantization(_) => "quantization",
            Error::Pipeline { .. } => "pipeline",
            Error::InvalidArgument(_) => "validation",
            Error::Empty(_) => "empty",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
