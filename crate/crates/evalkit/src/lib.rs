//! Evaluation protocols: span grammar and temporal IoU, single-lead masking
//! sweeps, report-to-label macro-AUC, exact match, and judge scoring.

pub mod auc;
pub mod iou;
pub mod judge;
pub mod report;
pub mod spans;
pub mod sweep;
pub mod text;

pub use auc::{class_auc, macro_auc, AucReport, LabelScoreMatrix};
pub use iou::{score_answer, temporal_iou};
pub use judge::{judge_all, judge_prompt, judge_score, mean_score, JudgeInput, JudgeOutcome, JudgeVerdict};
pub use report::EvalReport;
pub use spans::{parse_spans, Span, SpanParse, SpanSet, NOT_FOUND};
pub use sweep::{masking_sweep, MaskMode, Responder, SweepItem, SweepOutcome, SweepRow};
pub use text::{exact_match, report_to_scores, Embedder, FixtureEmbedder, HashingEmbedder};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no class has both positive and negative samples")]
    NoValidClass,
    #[error("embedder unavailable: {0}")]
    Embedder(String),
    #[error("invalid evaluation setting: {0}")]
    Config(String),
    #[error("responder failed: {0}")]
    Responder(String),
    #[error(transparent)]
    Client(#[from] anyecg_llm::LlmError),
    #[error(transparent)]
    Core(#[from] anyecg_core::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
