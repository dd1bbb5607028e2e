use thiserror::Error;

/// Errors raised while decoding one of the binary or JSON file formats.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unexpected end of input at byte {offset} while reading {field}")]
    UnexpectedEof { offset: usize, field: &'static str },
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("unknown version {version} at byte {offset}")]
    UnknownVersion { offset: usize, version: u32 },
    #[error("grid shape: {0}")]
    GridShape(String),
    #[error("invalid field {field} at byte {offset}: {detail}")]
    InvalidField {
        offset: usize,
        field: &'static str,
        detail: String,
    },
    #[error("trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize },
    #[error("json: {0}")]
    Json(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("spec mismatch at {layer}: {detail}")]
    SpecMismatch { layer: String, detail: String },
    #[error("generation error on edge {edge}: {detail}")]
    Generation { edge: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid solid {id}: {detail}")]
    InvalidSolid { id: String, detail: String },
    #[error("degenerate layer {layer}{}: normalized activations are identically zero", .solid.as_ref().map(|s| format!(" in solid {s}")).unwrap_or_default())]
    DegenerateLayer { layer: usize, solid: Option<String> },
    #[error("incompatible embeddings: {0}")]
    Incompatible(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown solid id {0:?}")]
    UnknownId(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
