//! Ingestion of labelled sentences that carry their state vectors inline,
//! one JSON object per line. This covers exports of existing corpora such
//! as RAGTruth, which have no answerability flag or prompt configuration;
//! those fields are simply left unset.
//!
//! ```json
//! {"record_id": "r1", "question_id": "q1", "model_id": "m", "quantization": "none",
//!  "template_id": "t1", "chunk_size": 350, "chunks_per_prompt": 3, "answerable": true,
//!  "label": 1, "states": {"cev_middle": [0.1, 0.2]}}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetRecord};
use crate::labeler::Label;
use crate::prompts::{ChunkCount, ChunkSize, TemplateId};
use crate::states::{Quantization, StateKind, StatesWriter};
use crate::Diagnostic;

fn unquantized() -> Quantization {
    Quantization::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub record_id: String,
    pub question_id: String,
    #[serde(default)]
    pub model_id: String,
    #[serde(default = "unquantized")]
    pub quantization: Quantization,
    #[serde(default)]
    pub template_id: Option<TemplateId>,
    #[serde(default)]
    pub chunk_size: Option<ChunkSize>,
    #[serde(default)]
    pub chunks_per_prompt: Option<ChunkCount>,
    #[serde(default)]
    pub answerable: Option<bool>,
    pub label: Label,
    #[serde(default)]
    pub states: BTreeMap<StateKind, Vec<f32>>,
}

/// Counts that ingestion keeps for rate tables: all records, not only those
/// with vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub model_id: String,
    pub quantization: Quantization,
    pub template_id: Option<TemplateId>,
    pub label: Label,
}

pub struct Ingested {
    pub dataset: Dataset,
    pub labels: Vec<LabelRow>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Builds one state store per (model, quantization). Records with an invalid
/// label, no vectors, or a vector layout that differs from the first record
/// of their group are left out of the dataset and reported (invalid labels
/// silently, as they are expected).
pub fn ingest(records: impl IntoIterator<Item = ExternalRecord>) -> Ingested {
    let mut writers: Vec<StatesWriter> = Vec::new();
    let mut layouts: Vec<Vec<(StateKind, usize)>> = Vec::new();
    let mut group_of: HashMap<(String, Quantization), usize> = HashMap::new();
    let mut rows_in: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    let mut labels = Vec::new();
    let mut diagnostics = Vec::new();
    for r in records {
        labels.push(LabelRow {
            model_id: r.model_id.clone(),
            quantization: r.quantization,
            template_id: r.template_id,
            label: r.label,
        });
        let Some(label) = r.label.as_target() else { continue };
        if r.states.is_empty() {
            diagnostics.push(Diagnostic::new(&r.record_id, "no state vectors"));
            continue;
        }
        let layout: Vec<(StateKind, usize)> = r.states.iter().map(|(k, v)| (*k, v.len())).collect();
        let key = (r.model_id.clone(), r.quantization);
        let g = *group_of.entry(key).or_insert_with(|| {
            writers.push(StatesWriter::new(&r.model_id, r.quantization, &layout));
            layouts.push(layout.clone());
            rows_in.push(0);
            writers.len() - 1
        });
        if layouts[g] != layout {
            diagnostics.push(Diagnostic::new(&r.record_id, format!("state layout {layout:?} differs from {:?}", layouts[g])));
            continue;
        }
        let vectors: Vec<&[f32]> = r.states.values().map(Vec::as_slice).collect();
        if let Err(e) = writers[g].push(&r.record_id, 0, &vectors) {
            diagnostics.push(Diagnostic::new(&r.record_id, e.to_string()));
            continue;
        }
        out.push(DatasetRecord {
            record_id: r.record_id,
            question_id: r.question_id,
            model_id: r.model_id,
            quantization: r.quantization,
            template_id: r.template_id,
            chunk_size: r.chunk_size,
            chunks_per_prompt: r.chunks_per_prompt,
            answerable: r.answerable,
            label,
            source: g,
            row: rows_in[g],
        });
        rows_in[g] += 1;
    }
    let stores = writers.into_iter().map(|w| Arc::new(w.finish().expect("rows validated on push"))).collect();
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ingested { dataset: Dataset { records: out, stores }, labels, diagnostics }
}

/// Reads a JSONL export; unparseable lines become diagnostics.
pub fn ingest_file(path: &Path) -> Result<Ingested, crate::jsonl::JsonlError> {
    let mut bad = Vec::new();
    let mut good = Vec::new();
    for (i, r) in crate::jsonl::read_lenient::<ExternalRecord>(path)?.enumerate() {
        match r {
            Ok(r) => good.push(r),
            Err(e) => bad.push(Diagnostic::new(format!("{}:{}", path.display(), i + 1), e.to_string())),
        }
    }
    let mut ing = ingest(good);
    bad.extend(ing.diagnostics);
    ing.diagnostics = bad;
    Ok(ing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str, extra: &str) -> String {
        format!(r#"{{"record_id": "{id}", "question_id": "q{id}", "label": {label}, "states": {{"cev_last": [1.0, 2.0]}}{extra}}}"#)
    }

    #[test]
    fn ragtruth_style_records_leave_configuration_unset() {
        let text = [line("a", "1", ""), line("b", "0", ""), line("c", "null", "")].join("\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        std::fs::write(&path, text).unwrap();
        let ing = ingest_file(&path).unwrap();
        assert_eq!(ing.dataset.records.len(), 2);
        assert_eq!(ing.labels.len(), 3);
        let r = &ing.dataset.records[0];
        assert_eq!((r.answerable, r.template_id, r.quantization), (None, None, Quantization::None));
        assert_eq!(ing.dataset.features(1, &[StateKind::CevLast]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn layout_mismatch_and_bad_lines_are_reported() {
        let text = [
            line("a", "1", r#", "model_id": "m""#),
            r#"{"record_id": "b", "question_id": "q", "label": 0, "model_id": "m", "states": {"cev_last": [1.0]}}"#.to_string(),
            "not json".to_string(),
        ]
        .join("\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, text).unwrap();
        let ing = ingest_file(&path).unwrap();
        assert_eq!(ing.dataset.records.len(), 1);
        assert_eq!(ing.diagnostics.len(), 2);
    }

    #[test]
    fn groups_by_model_and_quantization() {
        let recs: Vec<ExternalRecord> = ["none", "int4", "none"]
            .iter()
            .enumerate()
            .map(|(i, q)| {
                serde_json::from_str(&line(&i.to_string(), "0", &format!(r#", "model_id": "m", "quantization": "{q}""#))).unwrap()
            })
            .collect();
        let ing = ingest(recs);
        assert_eq!(ing.dataset.stores.len(), 2);
        let rows: Vec<(usize, usize)> = ing.dataset.records.iter().map(|r| (r.source, r.row)).collect();
        assert_eq!(rows, vec![(0, 0), (1, 0), (0, 1)]);
    }
}
