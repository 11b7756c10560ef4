use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: {0:?}")]
    InvalidLogits([f64; 2]),

    #[error("malformed probability distribution: {0}")]
    MalformedDistribution(String),

    #[error("no predictions")]
    NoPredictions,

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate sample_id `{0}`")]
    DuplicateId(String),

    #[error(
        "manifest line {line}: unknown label `{label}` (expected \"undissolved\" or \"dissolved\")"
    )]
    UnknownLabel { line: usize, label: String },

    #[error("image file not found: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough samples: {0}")]
    TooFewSamples(String),

    #[error("vial not found{}", in_frame(.frame))]
    VialNotFound { frame: String },

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("degenerate RoI: {width}x{height} (minimum 8x8)")]
    DegenerateRoi { width: u32, height: u32 },

    #[error("unknown backbone `{name}`; registered: {}", .registered.join(", "))]
    UnknownBackbone {
        name: String,
        registered: Vec<String>,
    },

    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),

    #[error("input size mismatch: model expects 3x{expected}x{expected}, got {got}")]
    InputSize { expected: u32, got: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("segmentation backend: {0}")]
    Backend(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] ::image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Nn(#[from] solis_nn::Error),
}

fn in_frame(frame: &str) -> String {
    if frame.is_empty() {
        String::new()
    } else {
        format!(" in frame `{frame}`")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a frame id to a [`Error::VialNotFound`]; other errors pass
    /// through.
    pub fn with_frame(self, id: &str) -> Self {
        match self {
            Error::VialNotFound { .. } => Error::VialNotFound {
                frame: id.to_string(),
            },
            e => e,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image(_) | Error::MissingImage(_) => 4,
            Error::VialNotFound { .. } => 3,
            _ => 2,
        }
    }
}
