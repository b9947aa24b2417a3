//! LLM and embedding providers, prompt templates, and per-call cost
//! accounting.
//!
//! Deterministic implementations (`ScriptedLlm`, `FnLlm`, `TokenOverlap`)
//! drive tests and offline runs; `HttpLlm` and `HttpEmbedder` speak the
//! OpenAI-compatible wire format.

mod embed;
mod http;
mod ledger;
pub mod prompts;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{token_overlap_similarity, EmbeddingProvider, HttpEmbedder, TokenOverlap};
pub use http::{HttpLlm, HttpSettings};
pub use ledger::{ledger_summary, CallRecord, CostLedger, LedgerSummary, MeteredLlm, Price, PriceTable};
pub use scripted::{FnLlm, Matcher, ScriptEntry, ScriptedLlm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("no script entry matches prompt starting {0:?}")]
    NoScriptMatch(String),
    #[error("script has no entries")]
    EmptyScript,
    #[error("cannot load script {path}: {message}")]
    Script { path: String, message: String },
    #[error("HTTP status {0}")]
    HttpError(u16),
    #[error("request timed out")]
    Timeout,
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider_reported: bool,
}

impl LlmUsage {
    /// Whitespace token counts, used when a provider reports no usage.
    pub fn approximate(prompt: &str, completion: &str) -> Self {
        LlmUsage {
            prompt_tokens: whitespace_tokens(prompt),
            completion_tokens: whitespace_tokens(completion),
            provider_reported: false,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

pub fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: LlmUsage,
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, prompt: &str, temperature: f64) -> Result<Completion, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Specialized,
    General,
}
