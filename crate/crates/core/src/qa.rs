//! Question and quoted-answer generation for harvested sentences.

use serde::{Deserialize, Serialize};

use crate::chat::{strip_code_fence, CallError, Caller, ChatRequest};
use crate::harvest::SentenceCandidate;
use crate::template::substitute;
use crate::Diagnostic;

pub const QA_PROMPT: &str = include_str!("../resources/qa_prompt.txt");

pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_TEMPERATURE: f32 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub candidate_ref: String,
    pub question: String,
    pub answer_quote: String,
    pub generator_model: String,
    pub raw_response: String,
}

pub fn render_qa_prompt(candidate: &SentenceCandidate) -> String {
    substitute(
        QA_PROMPT,
        &[
            ("title", &candidate.title),
            ("section_before_passage", &candidate.section_context),
            ("passage_text", &candidate.sentence),
        ],
    )
}

/// Case- and whitespace-sensitive substring test.
pub fn verify_quote(sentence: &str, quote: &str) -> bool {
    !quote.is_empty() && sentence.contains(quote)
}

#[derive(Debug, Deserialize)]
struct RawQa {
    answer_quote: serde_json::Value,
    question: serde_json::Value,
}

/// Parses a generator reply into `(answer_quote, question)`. Fenced code
/// blocks are unwrapped; leading or trailing prose around a single JSON
/// object is tolerated.
pub fn parse_qa_response(text: &str) -> Result<(String, String), String> {
    let body = strip_code_fence(text);
    let parsed: RawQa = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(first) => {
            let (Some(a), Some(b)) = (body.find('{'), body.rfind('}')) else {
                return Err(first.to_string());
            };
            serde_json::from_str(strip_code_fence(&body[a..=b])).map_err(|e| e.to_string())?
        }
    };
    let as_text = |v: serde_json::Value, key: &str| match v {
        serde_json::Value::String(s) => Ok(s),
        other => Err(format!("{key} is not a string: {other}")),
    };
    Ok((as_text(parsed.answer_quote, "answer_quote")?, as_text(parsed.question, "question")?))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QaRejection {
    #[error("request failed: {0}")]
    Call(CallError),
    #[error("answer quote {quote:?} is not a substring of the sentence")]
    QuoteNotInSentence { quote: String },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("question repeats the sentence verbatim")]
    QuestionIsSentence,
}

pub struct QaSettings {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl QaSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), temperature: DEFAULT_TEMPERATURE, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

pub fn generate_qa(
    candidate: &SentenceCandidate,
    caller: &Caller<'_>,
    settings: &QaSettings,
) -> Result<QaPair, QaRejection> {
    let prompt = render_qa_prompt(candidate);
    let request = ChatRequest::from_prompt(&settings.model, &prompt, settings.temperature, settings.max_tokens);
    let ((answer_quote, question), raw) = caller
        .complete_parsed(&request, parse_qa_response)
        .map_err(QaRejection::Call)?;
    if question.trim().is_empty() {
        return Err(QaRejection::EmptyQuestion);
    }
    if question == candidate.sentence {
        return Err(QaRejection::QuestionIsSentence);
    }
    if !verify_quote(&candidate.sentence, &answer_quote) {
        return Err(QaRejection::QuoteNotInSentence { quote: answer_quote });
    }
    Ok(QaPair {
        candidate_ref: candidate.candidate_id.clone(),
        question,
        answer_quote,
        generator_model: settings.model.clone(),
        raw_response: raw,
    })
}

/// Runs [`generate_qa`] over all candidates with bounded parallelism. Accepted
/// pairs come back in candidate order.
pub fn generate_all(
    candidates: &[SentenceCandidate],
    caller: &Caller<'_>,
    settings: &QaSettings,
    parallelism: usize,
) -> (Vec<QaPair>, Vec<Diagnostic>) {
    let results = crate::chat::run_bounded(candidates, parallelism, |c| generate_qa(c, caller, settings));
    let mut pairs = Vec::new();
    let mut diagnostics = Vec::new();
    for (c, r) in candidates.iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => diagnostics.push(Diagnostic::new(&c.candidate_id, e.to_string())),
        }
    }
    (pairs, diagnostics)
}
