use crate::score::ClassId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite score")]
    NonFinite,

    #[error("degenerate distribution")]
    Degenerate,

    #[error("negative score")]
    NegativeScore,

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("duplicate class {0} in vocabulary")]
    DuplicateClass(ClassId),

    #[error("need ≥2 classes")]
    NeedTwoClasses,

    #[error("unknown class {0}")]
    UnknownClass(ClassId),

    #[error("missing class description for class {0}")]
    MissingDescription(ClassId),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vocabulary mismatch: symmetric difference {{{}}}", join_classes(.0))]
    VocabularyMismatch(Vec<ClassId>),

    #[error("unnormalized row {row} (sum {sum})")]
    UnnormalizedRow { row: usize, sum: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("need both gate labels")]
    NeedBothGateLabels,

    #[error("need both positive and negative labels")]
    NeedBothLabels,

    #[error("S and U must be disjoint")]
    OverlappingVocabularies,

    #[error("empty class in evaluation set: {0}")]
    EmptyClass(ClassId),

    #[error("insufficient classes: {0}")]
    InsufficientClasses(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown variant `{name}`; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn join_classes(classes: &[ClassId]) -> String {
    classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for I/O failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}
