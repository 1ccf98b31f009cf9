//! Rule-based sentence segmentation shared by article harvesting and
//! response splitting.
//!
//! A boundary is a run of terminal punctuation (`.`, `!`, `?`), optionally
//! followed by closing quotes or brackets, then whitespace, then a sentence
//! start (uppercase letter or digit, optionally behind an opening quote or
//! bracket). A period after a known abbreviation or a single-letter initial
//! is not a boundary. Blank lines always end a sentence.

use serde::{Deserialize, Serialize};

/// Byte span of one sentence inside the segmented text. `end` excludes any
/// trailing whitespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "gen", "gov", "sen", "rep",
    "rev", "capt", "col", "lt", "sgt", "cpl", "adm", "hon", "vs", "etc", "approx", "inc", "ltd",
    "co", "corp", "no", "nos", "vol", "vols", "pp", "ed", "eds", "est", "fig", "dept", "univ",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "e.g",
    "i.e", "u.s", "u.k", "u.n", "a.m", "p.m", "cf", "al", "ca", "c",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}' | '\u{bb}')
}

fn is_opening(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}' | '\u{ab}')
}

/// The word immediately before byte offset `dot` (exclusive), lowercased,
/// including inner periods so that "e.g" and "U.S" are recognised.
fn word_before(text: &str, dot: usize) -> String {
    let head = &text[..dot];
    let start = head
        .char_indices()
        .rev()
        .find(|(_, c)| !(c.is_alphanumeric() || *c == '.'))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    head[start..].trim_start_matches('.').to_lowercase()
}

fn is_abbreviation(text: &str, dot: usize) -> bool {
    let word = word_before(text, dot);
    if word.is_empty() {
        return false;
    }
    if ABBREVIATIONS.contains(&word.as_str()) {
        return true;
    }
    // single-letter initial such as "J. Smith"
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if c.is_alphabetic())
}

/// Splits `text` into sentence spans. Leading and trailing whitespace of each
/// sentence is excluded; empty sentences are never produced.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;

    let push = |spans: &mut Vec<SentenceSpan>, s: usize, e: usize| {
        let piece = &text[s..e];
        let trimmed_end = s + piece.trim_end().len();
        if trimmed_end > s {
            spans.push(SentenceSpan { start: s, end: trimmed_end });
        }
    };

    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }

        // blank line: hard boundary
        if c == '\n' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j].1 == '\n' {
                push(&mut spans, start.take().unwrap(), pos);
                i = j + 1;
                continue;
            }
        }

        if is_terminal(c) {
            // consume the whole punctuation cluster and closers
            let mut j = i + 1;
            while j < chars.len() && is_terminal(chars[j].1) {
                j += 1;
            }
            while j < chars.len() && is_closing(chars[j].1) {
                j += 1;
            }
            let end = chars.get(j).map(|(p, _)| *p).unwrap_or(text.len());
            if j >= chars.len() {
                push(&mut spans, start.take().unwrap(), end);
                return spans;
            }
            if chars[j].1.is_whitespace() {
                let mut k = j;
                while k < chars.len() && chars[k].1.is_whitespace() {
                    k += 1;
                }
                while k < chars.len() && is_opening(chars[k].1) {
                    k += 1;
                }
                let starts_sentence = chars
                    .get(k)
                    .map(|(_, n)| n.is_uppercase() || n.is_ascii_digit())
                    .unwrap_or(false);
                let abbreviated = c == '.' && j == i + 1 && is_abbreviation(text, pos);
                if starts_sentence && !abbreviated {
                    push(&mut spans, start.take().unwrap(), end);
                    i = j;
                    continue;
                }
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        push(&mut spans, s, text.len());
    }
    spans
}

/// Convenience wrapper returning the sentence slices.
pub fn sentences(text: &str) -> Vec<&str> {
    split_sentences(text).iter().map(|s| s.slice(text)).collect()
}
