//! Shared error type for the whole pipeline.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! (paths, line numbers, unit addresses) that a CLI user can locate the bad
//! input without a debugger.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown split {value:?} (expected train, test, or validation)")]
    UnknownSplit {
        path: PathBuf,
        line: usize,
        value: String,
    },

    #[error("manifest mixes records with and without split assignments ({assigned} assigned, {unassigned} unassigned)")]
    MixedSplitAssignment { assigned: usize, unassigned: usize },

    #[error("duplicate image id {id:?}")]
    DuplicateImageId { id: String },

    #[error("{path}:{line}: {message}")]
    TableParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(
        "merge map is not canonical: {variant:?} maps to {target:?}, which is itself remapped"
    )]
    MergeMapChain { variant: String, target: String },

    #[error("word {word:?} does not occur in any candidate list of the corpus")]
    UnknownWord { word: String },

    #[error("unknown image id {id:?}")]
    UnknownImageId { id: String },

    #[error("unsupported format for {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("unit address out of range: {what} {index} (limit {limit})")]
    AddressOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    #[error("unit {flat_index}: {source}")]
    AtUnit {
        flat_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training set contains a single class ({class})")]
    SingleClass { class: &'static str },

    #[error("optimizer made no progress (step size underflow at epoch {epoch})")]
    NoProgress { epoch: usize },

    #[error("image id {id:?} appears in both the training and evaluation sets")]
    TrainTestOverlap { id: String },

    #[error("pair {pair_index} of {word:?} records {votes} positive votes but only {annotators} annotators")]
    VotesExceedAnnotators {
        word: String,
        pair_index: u32,
        votes: u32,
        annotators: u32,
    },

    #[error("constant input: {what} has zero variance, correlation is undefined")]
    ConstantInput { what: &'static str },

    #[error(
        "need at least {needed} words shared by machine and human scores, found {got} \
         (missing from one side: {missing:?})"
    )]
    InsufficientOverlap {
        needed: usize,
        got: usize,
        missing: Vec<String>,
    },

    #[error("saliency normalizer is zero: all accumulated divergence scores vanish")]
    ZeroNormalizer,

    #[error("missing stage input {path}: {remedy}")]
    MissingStageInput { path: PathBuf, remedy: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_unit(flat_index: usize, source: Error) -> Self {
        Error::AtUnit {
            flat_index,
            source: Box::new(source),
        }
    }
}
