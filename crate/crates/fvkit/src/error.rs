//! Error types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FvError>;

#[derive(Debug, Error)]
pub enum FvError {
    /// A task file failed to parse or violated the task schema.
    #[error("task format error in {path}: {detail}")]
    TaskFormat { path: String, detail: String },

    /// Too little data to perform the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A query index was also used as an in-context example.
    #[error("query index {query} overlaps context indices")]
    PromptOverlap { query: usize },

    /// Prompt construction violated a prompt invariant.
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    /// A token id fell outside the model vocabulary.
    #[error("token id {token} out of vocabulary (size {vocab_size})")]
    Vocabulary { token: u32, vocab_size: usize },

    /// A prompt tokenized past the model context length.
    #[error("prompt of {tokens} tokens exceeds context length {max}")]
    ContextOverflow { tokens: usize, max: usize },

    /// An intervention plan referenced an invalid layer or head.
    #[error("invalid intervention plan: {0}")]
    PlanInvalid(String),

    /// Target text produced no tokens.
    #[error("tokenization error: {0}")]
    Tokenization(String),

    /// A task failed the instruction-selection eligibility rule.
    #[error("task {task_id} skipped: {eligible} of {required} instructions reached the success floor")]
    TaskSkipped {
        task_id: String,
        eligible: usize,
        required: usize,
        /// Per-instruction `(spec_id, success_count)` pairs.
        success_counts: Vec<(String, usize)>,
    },

    /// A task could not supply enough successful prompts.
    #[error("task {task_id} ineligible: {detail}")]
    TaskIneligible { task_id: String, detail: String },

    /// The corpus cache is too small to form a candidate set.
    #[error("corpus cache holds {have} entries, need at least {need}")]
    InsufficientCache { have: usize, need: usize },

    /// Too few other-task instructions remain after exclusion.
    #[error("candidate pool holds {have} entries, need at least {need}")]
    InsufficientPool { have: usize, need: usize },

    /// A generator endpoint could not be reached after retries.
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: usize, detail: String },

    /// Model/vector dimensions do not line up.
    #[error("incompatible dimensions: {0}")]
    Compatibility(String),

    /// A selection parameter exceeded its bounds.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A head set referenced a head missing from an activation summary.
    #[error("activation summary is missing head (layer {layer}, head {head})")]
    MissingHeadMean { layer: usize, head: usize },

    /// Aggregation was attempted over zero eligible tasks.
    #[error("no eligible tasks to aggregate")]
    AggregationEmpty,

    /// A persisted artifact did not match the expected schema or model.
    #[error("store error: {0}")]
    Store(String),

    /// Artifacts produced under a different config hash were mixed.
    #[error("config hash mismatch: artifact {found} vs run {expected} (use --force to override)")]
    HashMismatch { found: String, expected: String },

    /// Two payloads were written under the same store key.
    #[error("store collision on key {key}")]
    Collision { key: String },

    /// The hidden-state probe was used without the debug flag.
    #[error("hidden-state probe is disabled (enable the debug probe flag)")]
    ProbeDisabled,

    /// Run configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
