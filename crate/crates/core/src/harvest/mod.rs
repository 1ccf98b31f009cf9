//! Candidate sentence extraction from encyclopedia article snapshots.
//!
//! A sentence becomes a [`SentenceCandidate`] when it is longer than 50
//! characters, carries at least one citation, contains no intra-wiki link,
//! and every date on every cited reference is strictly after the cutoff.

pub mod markup;

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::jsonl;
use crate::segment::split_sentences;
use crate::Diagnostic;

pub const MIN_SENTENCE_CHARS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub ref_id: String,
    #[serde(default)]
    pub date: Option<NaiveDate>,
    #[serde(default)]
    pub access_date: Option<NaiveDate>,
    #[serde(default)]
    pub archive_date: Option<NaiveDate>,
}

impl Reference {
    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        [self.date, self.access_date, self.archive_date].into_iter().flatten()
    }

    /// True when the reference has at least one date and all of them are
    /// strictly after `cutoff`.
    pub fn is_recent(&self, cutoff: NaiveDate) -> bool {
        let mut any = false;
        for d in self.dates() {
            if d <= cutoff {
                return false;
            }
            any = true;
        }
        any
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub paragraphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleSnapshot {
    pub article_id: String,
    pub title: String,
    pub created_at: NaiveDate,
    pub sections: Vec<Section>,
    #[serde(default)]
    pub references: Vec<Reference>,
}

impl ArticleSnapshot {
    fn validate(&self) -> Result<(), String> {
        if self.sections.is_empty() {
            return Err("article has no sections".into());
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.references {
            if !seen.insert(r.ref_id.as_str()) {
                return Err(format!("duplicate reference id {:?}", r.ref_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceCandidate {
    pub candidate_id: String,
    pub article_id: String,
    pub title: String,
    pub sentence: String,
    /// Section text preceding the sentence.
    pub section_context: String,
    pub reference_ids: Vec<String>,
    pub char_length: usize,
    /// Sentence ordinal within the article.
    pub position: usize,
}

impl SentenceCandidate {
    /// The passage the sentence came from: its preceding section text plus
    /// the sentence itself.
    pub fn passage(&self) -> String {
        if self.section_context.is_empty() {
            self.sentence.clone()
        } else {
            format!("{}\n{}", self.section_context, self.sentence)
        }
    }
}

/// The four candidate filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Length,
    Reference,
    Link,
    Recency,
}

/// Outcome of checking one sentence against every filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceVerdict {
    pub sentence: String,
    pub position: usize,
    pub failed: Vec<Filter>,
}

impl SentenceVerdict {
    pub fn accepted(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Snapshots retained by [`filter_recent_articles`], with diagnostics for
/// records that could not be read.
pub fn filter_recent_articles<I>(
    snapshots: I,
    cutoff: NaiveDate,
) -> impl Iterator<Item = Result<ArticleSnapshot, Diagnostic>>
where
    I: IntoIterator<Item = Result<ArticleSnapshot, Diagnostic>>,
{
    snapshots.into_iter().filter_map(move |item| match item {
        Err(d) => Some(Err(d)),
        Ok(s) => match s.validate() {
            Err(msg) => Some(Err(Diagnostic::new(&s.article_id, msg))),
            Ok(()) if s.created_at > cutoff => Some(Ok(s)),
            Ok(()) => None,
        },
    })
}

/// Reads `articles.jsonl`; a malformed line becomes a diagnostic and the
/// stream continues.
pub fn read_snapshots(
    path: &Path,
) -> Result<impl Iterator<Item = Result<ArticleSnapshot, Diagnostic>>, jsonl::JsonlError> {
    let display = path.display().to_string();
    Ok(jsonl::read_lenient::<ArticleSnapshot>(path)?
        .map(move |r| r.map_err(|e| Diagnostic::new(&display, e.to_string()))))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub candidates: Vec<SentenceCandidate>,
    pub diagnostics: Vec<Diagnostic>,
}

struct Walk {
    verdicts: Vec<(SentenceVerdict, SentenceCandidate)>,
    diagnostics: Vec<Diagnostic>,
}

fn walk(snapshot: &ArticleSnapshot, cutoff: NaiveDate) -> Walk {
    let refs: HashMap<&str, &Reference> =
        snapshot.references.iter().map(|r| (r.ref_id.as_str(), r)).collect();
    let mut verdicts = Vec::new();
    let mut diagnostics = Vec::new();
    let mut position = 0usize;

    for (si, section) in snapshot.sections.iter().enumerate() {
        let mut previous_paragraphs: Vec<String> = Vec::new();
        for (pi, raw) in section.paragraphs.iter().enumerate() {
            let parsed = match markup::parse_paragraph(raw) {
                Ok(p) => p,
                Err(e) => {
                    diagnostics.push(Diagnostic::new(
                        &snapshot.article_id,
                        format!("section {si} paragraph {pi}: {e}; paragraph skipped"),
                    ));
                    continue;
                }
            };
            let spans = split_sentences(&parsed.plain);
            for (k, span) in spans.iter().enumerate() {
                let next_start = spans.get(k + 1).map(|s| s.start).unwrap_or(usize::MAX);
                let lower = if k == 0 { 0 } else { span.start };
                let mut reference_ids: Vec<String> = Vec::new();
                for c in &parsed.citations {
                    if c.at >= lower && c.at < next_start && !reference_ids.contains(&c.ref_id) {
                        reference_ids.push(c.ref_id.clone());
                    }
                }
                let has_link = parsed.links.iter().any(|&(a, b)| a < span.end && b > span.start);
                let sentence = span.slice(&parsed.plain).to_string();
                let char_length = sentence.chars().count();

                let mut failed = Vec::new();
                if char_length <= MIN_SENTENCE_CHARS {
                    failed.push(Filter::Length);
                }
                if reference_ids.is_empty() {
                    failed.push(Filter::Reference);
                }
                if has_link {
                    failed.push(Filter::Link);
                }
                let mut recent = true;
                for id in &reference_ids {
                    match refs.get(id.as_str()) {
                        Some(r) => recent &= r.is_recent(cutoff),
                        None => {
                            diagnostics.push(Diagnostic::new(
                                &snapshot.article_id,
                                format!("citation {id:?} has no reference entry"),
                            ));
                            recent = false;
                        }
                    }
                }
                if !reference_ids.is_empty() && !recent {
                    failed.push(Filter::Recency);
                }

                let preceding = parsed.plain[..span.start].trim();
                let mut context_parts = previous_paragraphs.clone();
                if !preceding.is_empty() {
                    context_parts.push(preceding.to_string());
                }
                let candidate = SentenceCandidate {
                    candidate_id: format!("{}#{}", snapshot.article_id, position),
                    article_id: snapshot.article_id.clone(),
                    title: snapshot.title.clone(),
                    sentence: sentence.clone(),
                    section_context: context_parts.join("\n"),
                    reference_ids,
                    char_length,
                    position,
                };
                verdicts.push((SentenceVerdict { sentence, position, failed }, candidate));
                position += 1;
            }
            previous_paragraphs.push(parsed.plain.trim().to_string());
        }
    }
    Walk { verdicts, diagnostics }
}

/// Per-sentence filter outcomes for one article, in document order.
pub fn classify_sentences(snapshot: &ArticleSnapshot, cutoff: NaiveDate) -> Vec<SentenceVerdict> {
    walk(snapshot, cutoff).verdicts.into_iter().map(|(v, _)| v).collect()
}

pub fn extract_candidates(snapshot: &ArticleSnapshot, cutoff: NaiveDate) -> Extraction {
    let w = walk(snapshot, cutoff);
    Extraction {
        candidates: w
            .verdicts
            .into_iter()
            .filter(|(v, _)| v.accepted())
            .map(|(_, c)| c)
            .collect(),
        diagnostics: w.diagnostics,
    }
}

/// Filters and extracts over a whole corpus in parallel. Output is ordered by
/// (article_id, position) regardless of scheduling.
pub fn harvest<I>(snapshots: I, cutoff: NaiveDate) -> Extraction
where
    I: IntoIterator<Item = Result<ArticleSnapshot, Diagnostic>>,
{
    let mut diagnostics = Vec::new();
    let mut recent = Vec::new();
    for item in filter_recent_articles(snapshots, cutoff) {
        match item {
            Ok(s) => recent.push(s),
            Err(d) => diagnostics.push(d),
        }
    }
    let parts: Vec<Extraction> = recent.par_iter().map(|s| extract_candidates(s, cutoff)).collect();
    let mut candidates = Vec::new();
    for p in parts {
        candidates.extend(p.candidates);
        diagnostics.extend(p.diagnostics);
    }
    candidates.sort_by(|a, b| (&a.article_id, a.position).cmp(&(&b.article_id, b.position)));
    Extraction { candidates, diagnostics }
}
