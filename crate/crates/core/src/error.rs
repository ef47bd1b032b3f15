//! Error type shared by every pipeline stage.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt container: {0}")]
    Container(String),

    #[error("tensor `{name}` ({label}): expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        label: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` ({label}) is missing")]
    MissingTensor { name: String, label: String },

    #[error("tensor `{name}` ({label}) contains a non-finite value at flat index {index}")]
    NonFinite {
        name: String,
        label: String,
        index: usize,
    },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("cannot tokenize {text:?}: no vocabulary entry matches at {rest:?}")]
    Tokenize { text: String, rest: String },

    #[error("invalid tokenizer file: {0}")]
    TokenizerFormat(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("invalid probe corpus: {0}")]
    Corpus(String),

    #[error("probe for party {party:?} has a single class in its training split")]
    SingleClass { party: String },

    #[error(
        "probe training for party {party:?} diverged at epoch {epoch} (loss {loss}); \
         try a lower learning rate than {learning_rate}"
    )]
    Diverged {
        party: String,
        epoch: usize,
        loss: f64,
        learning_rate: f64,
    },

    #[error("invalid country config: {0}")]
    CountryConfig(String),

    #[error("template {template} has unresolved placeholder {{{placeholder}}}")]
    UnresolvedPlaceholder { template: String, placeholder: String },

    #[error("invalid marginals: {0}")]
    Marginals(String),

    #[error("persona space of {size} combinations exceeds the enumeration cap {cap}")]
    PersonaSpaceTooLarge { size: u128, cap: u128 },

    #[error("prompt for persona {persona}, template {template} has {len} tokens; max_seq_len is {max}")]
    PromptTooLong {
        persona: usize,
        template: String,
        len: usize,
        max: usize,
    },

    #[error("invalid survey data: {0}")]
    Survey(String),

    #[error("party {party:?} has no retained value vectors")]
    EmptySelection { party: String },

    #[error("parties {first:?} and {second:?} map to the same token id {token}")]
    DuplicatePartyToken {
        first: String,
        second: String,
        token: u32,
    },

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("missing cell: {0}")]
    MissingCell(String),

    #[error("regression needs at least 3 points with positive delta, found {0}")]
    TooFewPoints(usize),

    #[error("regression covariate has zero variance")]
    ZeroVariance,

    #[error("invalid plant spec: {0}")]
    PlantSpec(String),

    #[error("invalid run config: {0}")]
    RunConfig(String),

    #[error("{0}")]
    Artifact(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by user input or configuration rather than a bug.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Artifact(_))
    }
}
