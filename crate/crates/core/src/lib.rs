//! Recency-controlled RAG hallucination datasets and feed-forward probes over
//! LLM internal states.
//!
//! The pipeline runs harvest → qagen → prompts → (external capture) → label →
//! assemble → train → eval. Each stage lives in its own module and reads and
//! writes plain files, so stages can be rerun or replaced independently.

pub mod chat;
pub mod dataset;
pub mod eval;
pub mod harvest;
pub mod jsonl;
pub mod labeler;
pub mod pipeline;
pub mod probe;
pub mod prompts;
pub mod qa;
pub mod segment;
pub mod states;
pub mod template;

use serde::{Deserialize, Serialize};

/// A record-level problem that was reported and skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub record: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(record: impl Into<String>, message: impl Into<String>) -> Self {
        Self { record: record.into(), message: message.into() }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.record, self.message)
    }
}
