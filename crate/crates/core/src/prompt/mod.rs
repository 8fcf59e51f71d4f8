//! Prompt rendering for unprompted and prompted probing, plus the wire
//! protocol and fetch loop for an external inference service.

mod capture;
mod fetch;
mod template;

pub use capture::{capture, few_shot_for, CaptureOutput, CaptureSpec};
pub use fetch::{
    zero_shot_score, ActivationsRequest, ActivationsResponse, Fetcher, InferenceBackend, InferenceResult,
    LogitsRequest, LogitsResponse, NO, YES,
};
pub use template::{
    passage_text, render, to_plaintext_transcript, PromptConfig, PromptTemplate, RenderedPrompt, DEFAULT_ORGANIZATION,
};
