//! RAG prompt construction: one answerable and one unanswerable prompt per
//! question over a seeded random template / chunk-size / chunk-count draw.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harvest::SentenceCandidate;
use crate::qa::QaPair;
use crate::template::substitute;
use crate::Diagnostic;

pub const TEMPLATE_HUB: &str = include_str!("../resources/template_hub.txt");
pub const TEMPLATE_1: &str = include_str!("../resources/template_1.txt");
pub const TEMPLATE_2: &str = include_str!("../resources/template_2.txt");

/// Separator between chunks inside `{context}`.
pub const CHUNK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Hub,
    T1,
    T2,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId::Hub, TemplateId::T1, TemplateId::T2];

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::Hub => TEMPLATE_HUB,
            TemplateId::T1 => TEMPLATE_1,
            TemplateId::T2 => TEMPLATE_2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Hub => "hub",
            TemplateId::T1 => "t1",
            TemplateId::T2 => "t2",
        }
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hub" => Ok(TemplateId::Hub),
            "t1" | "1" => Ok(TemplateId::T1),
            "t2" | "2" => Ok(TemplateId::T2),
            other => Err(format!("unknown template {other:?}")),
        }
    }
}

macro_rules! numeric_enum {
    ($name:ident, $repr:ty, $what:literal, [$($variant:ident = $value:literal),+]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "u32", into = "u32")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: [$name; 3] = [$($name::$variant),+];

            pub fn value(self) -> $repr {
                match self {
                    $($name::$variant => $value),+
                }
            }
        }

        impl TryFrom<u32> for $name {
            type Error = String;
            fn try_from(v: u32) -> Result<Self, Self::Error> {
                match v {
                    $($value => Ok($name::$variant),)+
                    other => Err(format!(concat!("invalid ", $what, " {}"), other)),
                }
            }
        }

        impl From<$name> for u32 {
            fn from(v: $name) -> u32 {
                v.value() as u32
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let n: u32 = s.trim().parse().map_err(|_| format!(concat!("invalid ", $what, " {:?}"), s))?;
                n.try_into()
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.value())
            }
        }
    };
}

numeric_enum!(ChunkSize, usize, "chunk size", [S350 = 350, S550 = 550, S750 = 750]);
numeric_enum!(ChunkCount, usize, "chunk count", [One = 1, Three = 3, Five = 5]);

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub template_id: TemplateId,
    pub chunk_size: ChunkSize,
    pub chunks_per_prompt: ChunkCount,
    pub answerable: bool,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagPrompt {
    pub prompt_id: String,
    pub qa_ref: String,
    /// Groups the answerable/unanswerable pair.
    pub question_id: String,
    pub article_id: String,
    pub question: String,
    pub answer_quote: String,
    /// The source passage the question was generated from.
    pub passage: String,
    pub config: PromptConfig,
    pub chunks: Vec<String>,
    pub rendered: String,
    pub answer_chunk_index: Option<usize>,
}

pub fn render(template: TemplateId, question: &str, chunks: &[String]) -> String {
    let context = chunks.join(CHUNK_SEPARATOR);
    substitute(template.text(), &[("question", question), ("context", &context)])
}

/// Greedy left-to-right segmentation into pieces of at most `chunk_size`
/// characters, breaking at the last whitespace that fits. Runs without
/// whitespace longer than the limit are hard-split.
pub fn chunk_passage(text: &str, chunk_size: usize) -> Vec<String> {
    assert!(chunk_size > 0);
    let chars: Vec<char> = text.chars().collect();
    let mut chunks = Vec::new();
    let mut pos = 0;
    let skip_ws = |mut p: usize| {
        while p < chars.len() && chars[p].is_whitespace() {
            p += 1;
        }
        p
    };
    pos = skip_ws(pos);
    while pos < chars.len() {
        let remaining = chars.len() - pos;
        if remaining <= chunk_size {
            let piece: String = chars[pos..].iter().collect();
            let piece = piece.trim_end().to_string();
            if !piece.is_empty() {
                chunks.push(piece);
            }
            break;
        }
        let limit = pos + chunk_size;
        let cut = if chars[limit].is_whitespace() {
            limit
        } else {
            (pos + 1..limit).rev().find(|&i| chars[i].is_whitespace()).unwrap_or(limit)
        };
        let piece: String = chars[pos..cut].iter().collect();
        chunks.push(piece.trim_end().to_string());
        pos = skip_ws(cut);
    }
    chunks
}

/// The chunk holding the answer: the text of `passage` that ends with the
/// sentence, trimmed from the front to at most `chunk_size` characters at a
/// whitespace boundary. When the sentence alone is too long, the window is
/// placed so that it still covers the quote.
pub fn answer_chunk(passage: &str, sentence: &str, quote: &str, chunk_size: usize) -> Option<String> {
    let sent_at = passage.rfind(sentence)?;
    let upto = &passage[..sent_at + sentence.len()];
    let quote_at = sent_at + sentence.find(quote)?;

    let window = |text: &str, start_byte: usize, end_byte: usize| -> String {
        text[start_byte..end_byte].trim().to_string()
    };
    let char_starts: Vec<usize> = upto.char_indices().map(|(i, _)| i).chain([upto.len()]).collect();
    let n = char_starts.len() - 1;

    let tail_start = if n > chunk_size {
        let raw = char_starts[n - chunk_size];
        // move forward to the next word boundary unless we are already on one
        let prev_is_ws = upto[..raw].chars().next_back().map_or(true, char::is_whitespace);
        if prev_is_ws {
            raw
        } else {
            upto[raw..].find(char::is_whitespace).map(|o| raw + o).unwrap_or(upto.len())
        }
    } else {
        0
    };
    let tail = window(upto, tail_start, upto.len());
    if tail.contains(quote) && tail.chars().count() <= chunk_size {
        return Some(tail);
    }

    if quote.chars().count() > chunk_size {
        return None;
    }
    // centre on the quote instead
    let start_char = upto[..quote_at].chars().count();
    let end_char = (start_char + chunk_size).min(n);
    let mut end_byte = char_starts[end_char];
    if end_byte < upto.len() {
        if let Some(ws) = upto[quote_at + quote.len()..end_byte].rfind(char::is_whitespace) {
            end_byte = quote_at + quote.len() + ws;
        }
    }
    let piece = window(upto, quote_at, end_byte);
    piece.contains(quote).then_some(piece)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolChunk {
    pub article_id: String,
    pub text: String,
}

/// Pre-chunked passages of every article at every chunk size.
#[derive(Debug, Clone, Default)]
pub struct DistractorPool {
    by_size: BTreeMap<ChunkSize, Vec<PoolChunk>>,
}

impl DistractorPool {
    pub fn from_passages<'a>(passages: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut by_size: BTreeMap<ChunkSize, Vec<PoolChunk>> = BTreeMap::new();
        let mut seen: HashMap<ChunkSize, HashSet<String>> = HashMap::new();
        for (article_id, text) in passages {
            for size in ChunkSize::ALL {
                for chunk in chunk_passage(text, size.value()) {
                    if seen.entry(size).or_default().insert(chunk.clone()) {
                        by_size.entry(size).or_default().push(PoolChunk { article_id: article_id.to_string(), text: chunk });
                    }
                }
            }
        }
        Self { by_size }
    }

    /// Pool built from every candidate's passage.
    pub fn from_candidates(candidates: &[SentenceCandidate]) -> Self {
        let passages: Vec<(String, String)> =
            candidates.iter().map(|c| (c.article_id.clone(), c.passage())).collect();
        Self::from_passages(passages.iter().map(|(a, p)| (a.as_str(), p.as_str())))
    }

    pub fn chunks(&self, size: ChunkSize) -> &[PoolChunk] {
        self.by_size.get(&size).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("distractor pool has {available} eligible chunks of size {size}, {needed} needed")]
    PoolTooSmall { size: usize, needed: usize, available: usize },
    #[error("answer quote does not occur in the source sentence")]
    QuoteNotInPassage,
    #[error("answer quote longer than chunk size {0}")]
    QuoteTooLong(usize),
}

/// Counter-style RNG keyed by (global seed, question id); independent of the
/// order in which questions are processed.
pub fn question_rng(seed: u64, qa_ref: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(qa_ref.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws template, chunk size and chunk count uniformly.
pub fn draw_config(rng: &mut impl Rng, seed: u64) -> PromptConfig {
    PromptConfig {
        template_id: TemplateId::ALL[rng.random_range(0..3)],
        chunk_size: ChunkSize::ALL[rng.random_range(0..3)],
        chunks_per_prompt: ChunkCount::ALL[rng.random_range(0..3)],
        answerable: true,
        rng_seed: seed,
    }
}

pub fn build_prompt_pair(
    qa: &QaPair,
    source: &SentenceCandidate,
    pool: &DistractorPool,
    seed: u64,
) -> Result<(RagPrompt, RagPrompt), PromptError> {
    if !source.sentence.contains(&qa.answer_quote) {
        return Err(PromptError::QuoteNotInPassage);
    }
    let mut rng = question_rng(seed, &qa.candidate_ref);
    let config = draw_config(&mut rng, seed);
    let size = config.chunk_size.value();
    let k = config.chunks_per_prompt.value();

    let eligible: Vec<&PoolChunk> = pool
        .chunks(config.chunk_size)
        .iter()
        .filter(|c| c.article_id != source.article_id && !c.text.contains(&qa.answer_quote))
        .collect();
    if eligible.len() < k {
        return Err(PromptError::PoolTooSmall { size, needed: k, available: eligible.len() });
    }
    let distractors: Vec<String> = index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i].text.clone())
        .collect();

    let passage = source.passage();
    let answer = answer_chunk(&passage, &source.sentence, &qa.answer_quote, size)
        .ok_or(PromptError::QuoteTooLong(size))?;
    let slot = rng.random_range(0..k);
    let mut answerable_chunks: Vec<String> = distractors[..k - 1].to_vec();
    answerable_chunks.insert(slot, answer);

    let make = |answerable: bool, chunks: Vec<String>, answer_chunk_index: Option<usize>| RagPrompt {
        prompt_id: format!("{}/{}", qa.candidate_ref, if answerable { "a" } else { "u" }),
        qa_ref: qa.candidate_ref.clone(),
        question_id: qa.candidate_ref.clone(),
        article_id: source.article_id.clone(),
        question: qa.question.clone(),
        answer_quote: qa.answer_quote.clone(),
        passage: passage.clone(),
        config: PromptConfig { answerable, ..config },
        rendered: render(config.template_id, &qa.question, &chunks),
        chunks,
        answer_chunk_index,
    };
    Ok((make(true, answerable_chunks, Some(slot)), make(false, distractors, None)))
}

/// Builds prompt pairs for every Q&A whose candidate is known. Output order
/// follows `qas`; answerable precedes unanswerable.
pub fn build_all(
    qas: &[QaPair],
    candidates: &[SentenceCandidate],
    seed: u64,
) -> (Vec<RagPrompt>, Vec<Diagnostic>) {
    let pool = DistractorPool::from_candidates(candidates);
    let by_id: HashMap<&str, &SentenceCandidate> =
        candidates.iter().map(|c| (c.candidate_id.as_str(), c)).collect();
    let results: Vec<Result<(RagPrompt, RagPrompt), Diagnostic>> = qas
        .par_iter()
        .map(|qa| {
            let source = by_id
                .get(qa.candidate_ref.as_str())
                .ok_or_else(|| Diagnostic::new(&qa.candidate_ref, "no candidate with this id"))?;
            build_prompt_pair(qa, source, &pool, seed).map_err(|e| Diagnostic::new(&qa.candidate_ref, e.to_string()))
        })
        .collect();
    let mut prompts = Vec::new();
    let mut diagnostics = Vec::new();
    for r in results {
        match r {
            Ok((a, u)) => {
                prompts.push(a);
                prompts.push(u);
            }
            Err(d) => diagnostics.push(d),
        }
    }
    (prompts, diagnostics)
}
