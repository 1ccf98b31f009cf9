//! The boolean-to-label truth table, loaded from a text resource.
//!
//! Loading checks that every (answerability, C, G, F, IDK) combination is
//! covered and that no two overlapping rows disagree.

use std::sync::OnceLock;

use super::{JudgeVerdict, Label};

pub const TRUTH_TABLE: &str = include_str!("../../resources/truth_table.txt");

/// One cell of a row pattern: a fixed value or `*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Is(bool),
    Any,
}

impl Cell {
    fn matches(self, v: bool) -> bool {
        match self {
            Cell::Is(x) => x == v,
            Cell::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub answerable: bool,
    /// C, G, F, IDK.
    pub pattern: [Cell; 4],
    pub label: Label,
    pub line: usize,
}

impl Row {
    pub fn matches(&self, answerable: bool, bits: [bool; 4]) -> bool {
        self.answerable == answerable && self.pattern.iter().zip(bits).all(|(c, b)| c.matches(b))
    }

    /// Every concrete input this row covers.
    pub fn expand(&self) -> Vec<[bool; 4]> {
        all_inputs().filter(|b| self.pattern.iter().zip(*b).all(|(c, v)| c.matches(v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("lines {first} and {second} overlap with different labels")]
    Contradiction { first: usize, second: usize },
    #[error("no row covers answerable={answerable} C,G,F,IDK={bits:?}")]
    Uncovered { answerable: bool, bits: [bool; 4] },
}

/// All 16 (C, G, F, IDK) combinations in binary order.
pub fn all_inputs() -> impl Iterator<Item = [bool; 4]> {
    (0u8..16).map(|n| [n & 8 != 0, n & 4 != 0, n & 2 != 0, n & 1 != 0])
}

#[derive(Debug, Clone)]
pub struct TruthTable {
    rows: Vec<Row>,
}

impl TruthTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| TableError::Syntax { line, message };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let answerable = match fields[0] {
                "answerable" => true,
                "unanswerable" => false,
                other => return Err(err(format!("bad answerability {other:?}"))),
            };
            let mut pattern = [Cell::Any; 4];
            for (slot, f) in pattern.iter_mut().zip(&fields[1..5]) {
                *slot = match *f {
                    "1" => Cell::Is(true),
                    "0" => Cell::Is(false),
                    "*" => Cell::Any,
                    other => return Err(err(format!("bad cell {other:?}"))),
                };
            }
            let label = match fields[5] {
                "1" => Label::Hallucinated,
                "0" => Label::Grounded,
                "None" => Label::Invalid,
                other => return Err(err(format!("bad label {other:?}"))),
            };
            rows.push(Row { answerable, pattern, label, line });
        }
        let table = Self { rows };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<(), TableError> {
        for answerable in [true, false] {
            for bits in all_inputs() {
                let hits: Vec<&Row> = self.rows.iter().filter(|r| r.matches(answerable, bits)).collect();
                let Some(first) = hits.first() else {
                    return Err(TableError::Uncovered { answerable, bits });
                };
                if let Some(other) = hits.iter().find(|r| r.label != first.label) {
                    return Err(TableError::Contradiction { first: first.line, second: other.line });
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// First matching row in table order.
    pub fn lookup(&self, answerable: bool, bits: [bool; 4]) -> Label {
        self.rows
            .iter()
            .find(|r| r.matches(answerable, bits))
            .map(|r| r.label)
            .expect("table is total; checked at load")
    }

    /// The shipped table.
    pub fn builtin() -> &'static TruthTable {
        static TABLE: OnceLock<TruthTable> = OnceLock::new();
        TABLE.get_or_init(|| TruthTable::parse(TRUTH_TABLE).expect("built-in truth table is consistent"))
    }
}

pub fn map_booleans(answerable: bool, verdict: &JudgeVerdict) -> Label {
    TruthTable::builtin().lookup(answerable, verdict.bits())
}
