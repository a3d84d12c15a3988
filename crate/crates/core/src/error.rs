//! Error types for every stage of the pipeline.
//!
//! Each variant has a stable `code()` string so the service layer can map
//! engine failures onto wire errors one-to-one.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::bank::ImageId;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("rectangle lies outside the image")]
    OutOfBounds,
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure talking to an external model backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("vector must have at least one component")]
    EmptyVector,
    #[error("k={k} exceeds the {available} available scores")]
    KTooLarge { k: usize, available: usize },
    #[error("no element vectors supplied")]
    NoElements,
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("no decodable images in {0}")]
    EmptyBank(PathBuf),
    #[error("cannot read directory {path}: {source}")]
    UnreadableDirectory {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    BackendUnavailable(BackendError),
    #[error("embedding cache incomplete, {} image(s) missing", missing.len())]
    PartialCache { missing: Vec<ImageId> },
    #[error("bank is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("malformed embedding cache: {0}")]
    CacheFormat(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("embedding dimension {actual} does not match backend dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntentError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("element {0} is empty")]
    EmptyElement(usize),
    #[error("at least one element is required")]
    NoElements,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LayoutError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("q={q} exceeds the {available} reference cells")]
    QTooLarge { q: usize, available: usize },
    #[error("{0} elements exceed the permutation limit of 5")]
    TooManyElements(usize),
    #[error("pin at ({0},{1}) lies outside the grid")]
    PinOutOfBounds(u32, u32),
    #[error("pin at ({0},{1}) lies on the canvas")]
    PinOnCanvas(u32, u32),
    #[error("star cell ({0},{1}) is not a reference cell")]
    StarNotReference(u32, u32),
    #[error("attention prior does not cover the reference cells: {0}")]
    PriorMismatch(String),
    #[error("{slots} reference slots but only {available} candidates and pins")]
    InsufficientCandidates { slots: usize, available: usize },
    #[error("arrangement covers {arrangement} elements but the table has {table}")]
    ArrangementMismatch { arrangement: usize, table: usize },
}

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("image {0} was placed but not supplied")]
    MissingImage(ImageId),
    #[error("cell size must be positive")]
    ZeroSizeCell,
    #[error("result is {actual:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// `retryable` holds when every arrangement failed transiently.
    #[error("every arrangement failed; first failure: {first}")]
    AllArrangementsFailed { first: String, retryable: bool },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid score weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable(_) => "BackendUnavailable",
            BackendError::Timeout(_) => "Timeout",
            BackendError::Rejected(_) => "ContentRejected",
            BackendError::Protocol(_) => "BackendProtocol",
        }
    }
}

impl EngineError {
    /// Stable machine-readable code, one per failure kind.
    pub fn code(&self) -> &'static str {
        use EngineError as E;
        match self {
            E::Similarity(e) => match e {
                SimilarityError::DimensionMismatch { .. } => "DimensionMismatch",
                SimilarityError::ZeroVector => "ZeroVector",
                SimilarityError::NonFinite => "NonFiniteVector",
                SimilarityError::EmptyVector => "EmptyVector",
                SimilarityError::KTooLarge { .. } => "KTooLarge",
                SimilarityError::NoElements => "NoElements",
            },
            E::Bank(e) => match e {
                BankError::EmptyBank(_) => "EmptyBank",
                BankError::UnreadableDirectory { .. } => "UnreadableDirectory",
                BankError::BackendUnavailable(b) => b.code(),
                BankError::PartialCache { .. } => "PartialCache",
                BankError::Locked(_) => "BankLocked",
                BankError::CacheFormat(_) => "CacheFormat",
                BankError::Manifest(_) => "ManifestFormat",
                BankError::UnknownImage(_) => "UnknownImage",
                BankError::DimensionMismatch { .. } => "DimensionMismatch",
                BankError::Raster(_) => "RasterError",
                BankError::Io(_) => "IoError",
            },
            E::Intent(e) => match e {
                IntentError::EmptyPrompt => "EmptyPrompt",
                IntentError::EmptyElement(_) => "EmptyElement",
                IntentError::NoElements => "NoElements",
            },
            E::Layout(e) => match e {
                LayoutError::InvalidGrid(_) => "InvalidGrid",
                LayoutError::QTooLarge { .. } => "QTooLarge",
                LayoutError::TooManyElements(_) => "TooManyElements",
                LayoutError::PinOutOfBounds(..) => "PinOutOfBounds",
                LayoutError::PinOnCanvas(..) => "PinOnCanvas",
                LayoutError::StarNotReference(..) => "StarNotReference",
                LayoutError::PriorMismatch(_) => "PriorMismatch",
                LayoutError::InsufficientCandidates { .. } => "InsufficientCandidates",
                LayoutError::ArrangementMismatch { .. } => "ArrangementMismatch",
            },
            E::Compose(e) => match e {
                ComposeError::MissingImage(_) => "MissingImage",
                ComposeError::ZeroSizeCell => "ZeroSizeCell",
                ComposeError::DimensionMismatch { .. } => "DimensionMismatch",
                ComposeError::Raster(_) => "RasterError",
            },
            E::Generation(e) => match e {
                GenerationError::Backend(b) => b.code(),
                GenerationError::UnknownJob(_) => "UnknownJob",
                GenerationError::InvalidParams(_) => "InvalidParams",
                GenerationError::Raster(_) => "RasterError",
            },
            E::Backend(b) => b.code(),
            E::AllArrangementsFailed { .. } => "AllArrangementsFailed",
            E::UnknownSession(_) => "UnknownSession",
            E::UnknownRun(_) => "UnknownJob",
            E::InvalidSelection(_) => "InvalidSelection",
            E::EmptyInput(_) => "EmptyInput",
            E::InvalidWeights(_) => "InvalidWeights",
            E::Raster(_) => "RasterError",
            E::Io(_) => "IoError",
            E::Json(_) => "JsonError",
        }
    }

    /// True when retrying the same request later may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            EngineError::Backend(b) => b.is_retryable(),
            EngineError::Generation(GenerationError::Backend(b)) => b.is_retryable(),
            EngineError::Bank(BankError::BackendUnavailable(b)) => b.is_retryable(),
            EngineError::Bank(BankError::Locked(_)) => true,
            EngineError::AllArrangementsFailed { retryable, .. } => *retryable,
            _ => false,
        }
    }
}
