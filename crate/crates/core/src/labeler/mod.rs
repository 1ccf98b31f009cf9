//! Sentence labelling from four judge booleans.

pub mod truth_table;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chat::{strip_code_fence, Caller, ChatRequest};
use crate::prompts::{ChunkCount, ChunkSize, RagPrompt, TemplateId};
use crate::states::{Quantization, ResponseRecord};
use crate::template::substitute;
use crate::Diagnostic;

pub use truth_table::{map_booleans, TruthTable};

pub const JUDGE_PROMPT: &str = include_str!("../../resources/judge_prompt.txt");
pub const DEFAULT_MODEL: &str = "gpt-4o";

/// Hallucinated = 1, grounded = 0, invalid = `null` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Hallucinated,
    Grounded,
    Invalid,
}

impl Label {
    pub fn as_target(self) -> Option<u8> {
        match self {
            Label::Hallucinated => Some(1),
            Label::Grounded => Some(0),
            Label::Invalid => None,
        }
    }

    pub fn is_valid(self) -> bool {
        self != Label::Invalid
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.as_target().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Option::<u8>::deserialize(d)? {
            Some(1) => Ok(Label::Hallucinated),
            Some(0) => Ok(Label::Grounded),
            None => Ok(Label::Invalid),
            Some(other) => Err(serde::de::Error::custom(format!("label must be 0, 1 or null, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub conflicting: bool,
    pub grounded: bool,
    pub has_factual_information: bool,
    pub no_clear_answer: bool,
    #[serde(default)]
    pub rationale: String,
}

impl JudgeVerdict {
    pub fn new(conflicting: bool, grounded: bool, has_factual_information: bool, no_clear_answer: bool) -> Self {
        Self { conflicting, grounded, has_factual_information, no_clear_answer, rationale: String::new() }
    }

    /// C, G, F, IDK.
    pub fn bits(&self) -> [bool; 4] {
        [self.conflicting, self.grounded, self.has_factual_information, self.no_clear_answer]
    }
}

pub struct JudgeInput<'a> {
    pub sentence: &'a str,
    pub full_response: &'a str,
    pub passage: &'a str,
    pub question: &'a str,
    pub answer_quote: &'a str,
}

pub fn render_judge_prompt(input: &JudgeInput<'_>) -> String {
    substitute(
        JUDGE_PROMPT,
        &[
            ("passage", input.passage),
            ("question", input.question),
            ("answer_quote", input.answer_quote),
            ("response", input.full_response),
            ("sentence", input.sentence),
        ],
    )
}

#[derive(Deserialize)]
struct Booleans {
    conflicting: bool,
    grounded: bool,
    has_factual_information: bool,
    no_clear_answer: bool,
}

/// Reads the trailing JSON object of a chain-of-thought reply. Everything
/// before it is kept as the rationale.
pub fn parse_verdict(text: &str) -> Result<JudgeVerdict, String> {
    let body = text.trim_end();
    let body = body.strip_suffix("```").unwrap_or(body);
    let close = body.rfind('}').ok_or("no JSON object in verdict")?;
    let mut candidates: Vec<usize> = body[..close].match_indices('{').map(|(i, _)| i).collect();
    candidates.reverse();
    let mut last_err = String::from("no JSON object in verdict");
    for open in candidates {
        match serde_json::from_str::<Booleans>(strip_code_fence(&body[open..=close])) {
            Ok(b) => {
                let mut rationale = body[..open].trim_end();
                rationale = rationale.strip_suffix("```json").or_else(|| rationale.strip_suffix("```")).unwrap_or(rationale);
                return Ok(JudgeVerdict {
                    conflicting: b.conflicting,
                    grounded: b.grounded,
                    has_factual_information: b.has_factual_information,
                    no_clear_answer: b.no_clear_answer,
                    rationale: rationale.trim().to_string(),
                });
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}

pub struct JudgeSettings {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl JudgeSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), temperature: 0.0, max_tokens: 1024 }
    }
}

pub fn judge_sentence(
    input: &JudgeInput<'_>,
    caller: &Caller<'_>,
    settings: &JudgeSettings,
) -> Result<JudgeVerdict, crate::chat::CallError> {
    let prompt = render_judge_prompt(input);
    let request = ChatRequest::from_prompt(&settings.model, &prompt, settings.temperature, settings.max_tokens);
    caller.complete_parsed(&request, parse_verdict).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub prompt_ref: String,
    pub question_id: String,
    pub sentence_index: usize,
    pub sentence: String,
    pub model_id: String,
    pub quantization: Quantization,
    pub template_id: TemplateId,
    pub chunk_size: ChunkSize,
    pub chunks_per_prompt: ChunkCount,
    pub answerable: bool,
    pub conflicting: Option<bool>,
    pub grounded: Option<bool>,
    pub has_factual_information: Option<bool>,
    pub no_clear_answer: Option<bool>,
    pub label: Label,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl LabeledSentence {
    fn from_parts(prompt: &RagPrompt, response: &ResponseRecord, index: usize, sentence: &str) -> Self {
        Self {
            prompt_ref: prompt.prompt_id.clone(),
            question_id: prompt.question_id.clone(),
            sentence_index: index,
            sentence: sentence.to_string(),
            model_id: response.model_id.clone(),
            quantization: response.quantization,
            template_id: prompt.config.template_id,
            chunk_size: prompt.config.chunk_size,
            chunks_per_prompt: prompt.config.chunks_per_prompt,
            answerable: prompt.config.answerable,
            conflicting: None,
            grounded: None,
            has_factual_information: None,
            no_clear_answer: None,
            label: Label::Invalid,
            rationale: String::new(),
            diagnostic: None,
        }
    }

    fn with_verdict(mut self, v: JudgeVerdict) -> Self {
        self.label = map_booleans(self.answerable, &v);
        self.conflicting = Some(v.conflicting);
        self.grounded = Some(v.grounded);
        self.has_factual_information = Some(v.has_factual_information);
        self.no_clear_answer = Some(v.no_clear_answer);
        self.rationale = v.rationale;
        self
    }
}

/// Judges every sentence of every response. Sentences whose verdict cannot
/// be parsed are kept as invalid with a diagnostic; responses without a
/// matching prompt are reported and skipped.
pub fn label_all(
    responses: &[ResponseRecord],
    prompts: &[RagPrompt],
    caller: &Caller<'_>,
    settings: &JudgeSettings,
    parallelism: usize,
) -> (Vec<LabeledSentence>, Vec<Diagnostic>) {
    let by_id: HashMap<&str, &RagPrompt> = prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
    let mut diagnostics = Vec::new();
    let mut jobs = Vec::new();
    for r in responses {
        let Some(p) = by_id.get(r.prompt_ref.as_str()) else {
            diagnostics.push(Diagnostic::new(&r.prompt_ref, "response has no matching prompt"));
            continue;
        };
        for s in &r.sentences {
            jobs.push((*p, r, s.index, s.text.as_str()));
        }
    }
    let labeled = crate::chat::run_bounded(&jobs, parallelism, |(p, r, idx, text)| {
        let base = LabeledSentence::from_parts(p, r, *idx, text);
        let input = JudgeInput {
            sentence: text,
            full_response: &r.response,
            passage: &p.passage,
            question: &p.question,
            answer_quote: &p.answer_quote,
        };
        match judge_sentence(&input, caller, settings) {
            Ok(v) => base.with_verdict(v),
            Err(e) => LabeledSentence { diagnostic: Some(e.to_string()), ..base },
        }
    });
    for l in &labeled {
        if let Some(d) = &l.diagnostic {
            diagnostics.push(Diagnostic::new(format!("{}#{}", l.prompt_ref, l.sentence_index), d.clone()));
        }
    }
    (labeled, diagnostics)
}

/// Total and valid sentence counts per (model, quantization).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub total: usize,
    pub valid: usize,
    pub hallucinated: usize,
}

impl LabelCounts {
    pub fn invalid(&self) -> usize {
        self.total - self.valid
    }

    pub fn valid_percent(&self) -> f64 {
        100.0 * self.valid as f64 / self.total as f64
    }
}

pub fn label_counts(labeled: &[LabeledSentence]) -> BTreeMap<(String, Quantization), LabelCounts> {
    let mut out: BTreeMap<(String, Quantization), LabelCounts> = BTreeMap::new();
    for l in labeled {
        let c = out.entry((l.model_id.clone(), l.quantization)).or_default();
        c.total += 1;
        if l.label.is_valid() {
            c.valid += 1;
        }
        if l.label == Label::Hallucinated {
            c.hallucinated += 1;
        }
    }
    out
}
