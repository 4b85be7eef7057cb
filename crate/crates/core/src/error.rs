//! One error type for the whole crate.
//!
//! Everything that can go wrong is a `CmError`; the dispatch layer folds
//! errors into in-band envelope codes via [`CmError::envelope_code`], so
//! nothing escapes the unified access function out-of-band.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CmError>;

#[derive(Debug)]
pub enum CmError {
    // repository
    PermissionDenied(String),
    NotADirectory(String),
    NotFound(String),
    CorruptMeta { path: String, detail: String },
    AliasConflict(String),
    BadKeyPath(String),
    LockBusy(String),
    Io { context: String, source: std::io::Error },

    // dispatch
    ModuleNotFound(String),
    ActionNotFound { module: String, action: String },
    DuplicateModule(String),
    Validation(String),
    HookFailure { plugin_id: String, detail: String },
    ActionFailed(String),

    // pipeline
    StageFailure { stage: String, output: String, point: Option<String> },
    CompilerNotFound(String),
    Timeout { seconds: f64 },
    LaunchFailure(String),

    // stats
    EmptyInput,
    UnknownKey(String),

    // exploration
    MissingObjective(String),
    EvaluatorFailure { dim: String, detail: String },
    ArityMismatch { expected: usize, got: usize },

    // learning
    InsufficientData(String),
    DegenerateFeature,
    MissingFeature(String),
    PredicateMismatch(String),
    NoModels(String),

    // remote
    BindFailure(String),
    Transport(String),
}

impl fmt::Display for CmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmError::PermissionDenied(p) => write!(f, "permission denied: {p}"),
            CmError::NotADirectory(p) => write!(f, "not a directory: {p}"),
            CmError::NotFound(what) => write!(f, "not found: {what}"),
            CmError::CorruptMeta { path, detail } => {
                write!(f, "corrupt meta at {path}: {detail}")
            }
            CmError::AliasConflict(a) => write!(f, "alias conflict: {a}"),
            CmError::BadKeyPath(p) => write!(f, "bad key path: {p}"),
            CmError::LockBusy(p) => write!(f, "lock busy: {p}"),
            CmError::Io { context, source } => write!(f, "io error ({context}): {source}"),
            CmError::ModuleNotFound(m) => write!(f, "module not found: {m}"),
            CmError::ActionNotFound { module, action } => {
                write!(f, "action not found: {module}:{action}")
            }
            CmError::DuplicateModule(m) => write!(f, "duplicate module: {m}"),
            CmError::Validation(msg) => write!(f, "parameter validation failed: {msg}"),
            CmError::HookFailure { plugin_id, detail } => {
                write!(f, "hook failure in plugin {plugin_id}: {detail}")
            }
            CmError::ActionFailed(msg) => write!(f, "action failed: {msg}"),
            CmError::StageFailure { stage, output, .. } => {
                write!(f, "stage {stage} failed: {output}")
            }
            CmError::CompilerNotFound(cc) => write!(f, "compiler not found: {cc}"),
            CmError::Timeout { seconds } => write!(f, "timed out after {seconds}s"),
            CmError::LaunchFailure(msg) => write!(f, "launch failure: {msg}"),
            CmError::EmptyInput => write!(f, "empty input"),
            CmError::UnknownKey(k) => write!(f, "unknown key: {k}"),
            CmError::MissingObjective(k) => write!(f, "missing objective: {k}"),
            CmError::EvaluatorFailure { dim, detail } => {
                write!(f, "evaluator failure on dim {dim}: {detail}")
            }
            CmError::ArityMismatch { expected, got } => {
                write!(f, "arity mismatch: expected {expected}, got {got}")
            }
            CmError::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            CmError::DegenerateFeature => write!(f, "degenerate feature: all values equal"),
            CmError::MissingFeature(k) => write!(f, "missing feature: {k}"),
            CmError::PredicateMismatch(msg) => write!(f, "predicate mismatch: {msg}"),
            CmError::NoModels(msg) => write!(f, "no models: {msg}"),
            CmError::BindFailure(msg) => write!(f, "bind failure: {msg}"),
            CmError::Transport(msg) => write!(f, "transport error: {msg}"),
        }
    }
}

impl std::error::Error for CmError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CmError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl CmError {
    /// In-band return code for the access envelope: 1 = module not found,
    /// 2 = action not found, 3 = parameter validation failed, 4 = internal.
    pub fn envelope_code(&self) -> u32 {
        match self {
            CmError::ModuleNotFound(_) => 1,
            CmError::ActionNotFound { .. } => 2,
            CmError::Validation(_)
            | CmError::BadKeyPath(_)
            | CmError::ArityMismatch { .. }
            | CmError::MissingObjective(_)
            | CmError::MissingFeature(_)
            | CmError::UnknownKey(_) => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> CmError {
        let context = context.into();
        match source.kind() {
            std::io::ErrorKind::PermissionDenied => CmError::PermissionDenied(context),
            std::io::ErrorKind::NotADirectory => CmError::NotADirectory(context),
            _ => CmError::Io { context, source },
        }
    }
}
