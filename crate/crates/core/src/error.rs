use std::fmt;
use std::path::PathBuf;

/// A single invariant violation found while validating an [`EditConfig`](crate::config::EditConfig).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_fields(.0))]
    Config(Vec<FieldError>),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing {anchor} anchor for layer {layer} at step {step}")]
    MissingAnchor {
        anchor: &'static str,
        layer: usize,
        step: usize,
    },

    #[error("object token {0:?} not found in the source prompt")]
    TokenNotFound(String),

    #[error("no object token positions: the mask path needs at least one object token")]
    NoObjectTokens,

    #[error("attention map stack is empty")]
    EmptyMapStack,

    #[error("interpolation cap exceeded: {0}")]
    InterpolationCap(String),

    #[error("backbone failure at timestep {timestep}: {source}")]
    Backbone {
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("adapter failure on frame {frame}: {message}")]
    Adapter { frame: usize, message: String },

    #[error("video decode error: {0}")]
    Decode(String),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("{context}: {source}")]
    Stage {
        context: StageContext,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(expected: impl fmt::Debug, actual: impl fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the pipeline position it occurred at.
    pub fn at(self, context: StageContext) -> Self {
        Error::Stage {
            context,
            source: Box::new(self),
        }
    }

    /// Stable machine-readable kind used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::MissingAnchor { .. } => "missing_anchor",
            Error::TokenNotFound(_) => "token_not_found",
            Error::NoObjectTokens => "no_object_tokens",
            Error::EmptyMapStack => "empty_map_stack",
            Error::InterpolationCap(_) => "interpolation_cap",
            Error::Backbone { .. } => "backbone",
            Error::Adapter { .. } => "adapter",
            Error::Decode(_) => "decode",
            Error::Unsupported(_) => "unsupported",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}

/// Where in the pipeline an error was raised.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct StageContext {
    pub stage: &'static str,
    pub window: Option<usize>,
    pub frame: Option<usize>,
    pub step: Option<usize>,
}

impl StageContext {
    pub fn new(stage: &'static str) -> Self {
        Self {
            stage,
            ..Default::default()
        }
    }

    pub fn window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn frame(mut self, frame: usize) -> Self {
        self.frame = Some(frame);
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }
}

impl fmt::Display for StageContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.stage)?;
        if let Some(w) = self.window {
            write!(f, " window={w}")?;
        }
        if let Some(j) = self.frame {
            write!(f, " frame={j}")?;
        }
        if let Some(s) = self.step {
            write!(f, " step={s}")?;
        }
        Ok(())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
