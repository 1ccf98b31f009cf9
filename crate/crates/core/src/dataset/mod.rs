//! Labelled sentences joined with their state vectors, split by question and
//! balanced by oversampling.
//!
//! An assembled dataset directory holds `dataset.manifest.json` and one
//! `states/<n>/` capture directory per source, copied byte for byte.

pub mod balance;
pub mod external;
pub mod split;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::labeler::LabeledSentence;
use crate::probe::Samples;
use crate::prompts::{ChunkCount, ChunkSize, TemplateId};
use crate::states::{Quantization, StateKind, StateStore, StatesError};
use crate::Diagnostic;

pub use balance::{expand, oversample, BalanceError, BalanceTargets, FieldValue, Stratum, StratumCounts};
pub use split::{partition_sizes, split_questions, Ratios, Split, SplitError};

pub const MANIFEST_FILE: &str = "dataset.manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub record_id: String,
    /// Shared by both prompts of a question and all their sentences.
    pub question_id: String,
    pub model_id: String,
    pub quantization: Quantization,
    pub template_id: Option<TemplateId>,
    pub chunk_size: Option<ChunkSize>,
    pub chunks_per_prompt: Option<ChunkCount>,
    pub answerable: Option<bool>,
    /// 1 = hallucinated, 0 = grounded.
    pub label: u8,
    /// Index of the state store holding this record's vectors.
    pub source: usize,
    pub row: usize,
}

impl DatasetRecord {
    pub fn stratum(&self) -> Stratum {
        Stratum {
            answerable: self.answerable,
            label: self.label,
            template_id: self.template_id,
            chunk_size: self.chunk_size,
            chunks_per_prompt: self.chunks_per_prompt,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    States(#[from] StatesError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("{split}: {source}")]
    Balance {
        split: String,
        #[source]
        source: BalanceError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Records plus the stores their vectors live in.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub stores: Vec<Arc<StateStore>>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Width of the concatenated `kinds` vector; every store must agree.
    pub fn input_size(&self, kinds: &[StateKind]) -> Result<usize, DatasetError> {
        let mut size = None;
        for (i, s) in self.stores.iter().enumerate() {
            if !self.records.iter().any(|r| r.source == i) {
                continue;
            }
            let mut d = 0;
            for k in kinds {
                d += *s.manifest.dims.get(k).ok_or(StatesError::MissingKind(*k))?;
            }
            match size {
                None => size = Some(d),
                Some(prev) if prev != d => {
                    return Err(DatasetError::Invalid(format!(
                        "state dimensions differ between sources ({prev} vs {d} for {kinds:?})"
                    )))
                }
                Some(_) => {}
            }
        }
        size.ok_or_else(|| DatasetError::Invalid("dataset has no records".into()))
    }

    pub fn features(&self, record: usize, kinds: &[StateKind]) -> Result<Vec<f32>, DatasetError> {
        let r = &self.records[record];
        Ok(self.stores[r.source].features(r.row, kinds)?)
    }

    /// Feature matrix and labels for the given records (repeats allowed).
    pub fn samples(&self, picks: &[usize], kinds: &[StateKind]) -> Result<Samples, DatasetError> {
        let rows: Vec<Vec<f32>> = picks.iter().map(|&i| self.features(i, kinds)).collect::<Result<_, _>>()?;
        let labels: Vec<u8> = picks.iter().map(|&i| self.records[i].label).collect();
        Samples::from_rows(&rows, &labels).map_err(|e| DatasetError::Invalid(e.to_string()))
    }

    /// Keeps the records that pass `keep`; stores are shared.
    pub fn filter(&self, keep: impl Fn(&DatasetRecord) -> bool) -> Dataset {
        Dataset { records: self.records.iter().filter(|r| keep(r)).cloned().collect(), stores: self.stores.clone() }
    }

    /// Concatenates datasets, renumbering sources.
    pub fn merge(parts: Vec<Dataset>) -> Dataset {
        let mut out = Dataset { records: Vec::new(), stores: Vec::new() };
        for part in parts {
            let base = out.stores.len();
            out.records.extend(part.records.into_iter().map(|r| DatasetRecord { source: r.source + base, ..r }));
            out.stores.extend(part.stores);
        }
        out.records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        out
    }

    pub fn strata(&self) -> Vec<Stratum> {
        self.records.iter().map(DatasetRecord::stratum).collect()
    }

    pub fn write(&self, dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
        for (i, s) in self.stores.iter().enumerate() {
            crate::states::write_store(s, &dir.join(source_dir(i)))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest)
            .map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
        std::fs::write(&path, text).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn open(dir: &Path) -> Result<(Dataset, DatasetManifest), DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DatasetError::Invalid(format!("unsupported dataset format {}", manifest.format_version)));
        }
        let stores = manifest
            .sources
            .iter()
            .map(|s| StateStore::open(&dir.join(&s.path)).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &manifest.records {
            let store = stores.get(r.source).ok_or_else(|| DatasetError::Invalid(format!("{}: unknown source {}", r.record_id, r.source)))?;
            if r.row >= store.len() {
                return Err(DatasetError::Invalid(format!("{}: row {} out of range", r.record_id, r.row)));
            }
        }
        Ok((Dataset { records: manifest.records.clone(), stores }, manifest))
    }
}

fn source_dir(i: usize) -> String {
    format!("states/{i}")
}

/// Joins valid labels with their state rows. Invalid labels are counted and
/// dropped; labels without a captured row are reported.
pub fn assemble(labeled: &[LabeledSentence], stores: Vec<StateStore>) -> (Dataset, AssemblyStats, Vec<Diagnostic>) {
    let by_config: HashMap<(&str, Quantization), usize> =
        stores.iter().enumerate().map(|(i, s)| ((s.manifest.model_id.as_str(), s.manifest.quantization), i)).collect();
    let mut stats = AssemblyStats::default();
    let mut diagnostics = Vec::new();
    let mut records = Vec::new();
    for l in labeled {
        stats.labeled += 1;
        let Some(label) = l.label.as_target() else {
            stats.invalid += 1;
            continue;
        };
        let record_id = format!("{}/{}/{}#{}", l.model_id, l.quantization, l.prompt_ref, l.sentence_index);
        let Some(&source) = by_config.get(&(l.model_id.as_str(), l.quantization)) else {
            stats.missing_rows += 1;
            diagnostics.push(Diagnostic::new(&record_id, "no state capture for this model and quantization"));
            continue;
        };
        let Some(row) = stores[source].row_index(&l.prompt_ref, l.sentence_index) else {
            stats.missing_rows += 1;
            diagnostics.push(Diagnostic::new(&record_id, "sentence has no state row"));
            continue;
        };
        records.push(DatasetRecord {
            record_id,
            question_id: l.question_id.clone(),
            model_id: l.model_id.clone(),
            quantization: l.quantization,
            template_id: Some(l.template_id),
            chunk_size: Some(l.chunk_size),
            chunks_per_prompt: Some(l.chunks_per_prompt),
            answerable: Some(l.answerable),
            label,
            source,
            row,
        });
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    stats.records = records.len();
    (Dataset { records, stores: stores.into_iter().map(Arc::new).collect() }, stats, diagnostics)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyStats {
    pub labeled: usize,
    pub invalid: usize,
    pub missing_rows: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub path: String,
    pub model_id: String,
    pub quantization: Quantization,
    pub dims: BTreeMap<StateKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSplit {
    pub questions: usize,
    pub records: usize,
    /// `[record index, copies]` for each record of the split.
    pub multiplicity: Vec<(usize, usize)>,
    pub counts: StratumCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub ratios: Ratios,
    pub sources: Vec<SourceInfo>,
    pub stats: AssemblyStats,
    pub records: Vec<DatasetRecord>,
    pub assignment: BTreeMap<String, Split>,
    pub splits: BTreeMap<Split, BalancedSplit>,
}

/// Records of each split, as indices into `dataset.records`.
pub fn split_records(dataset: &Dataset, assignment: &BTreeMap<String, Split>) -> BTreeMap<Split, Vec<usize>> {
    let mut out: BTreeMap<Split, Vec<usize>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for (i, r) in dataset.records.iter().enumerate() {
        if let Some(s) = assignment.get(&r.question_id) {
            out.get_mut(s).expect("all splits present").push(i);
        }
    }
    out
}

/// Oversamples one subset of records and returns the expanded, canonically
/// ordered record indices.
pub fn balance_subset(
    dataset: &Dataset,
    members: &[usize],
    targets: &BalanceTargets,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), BalanceError> {
    let strata: Vec<Stratum> = members.iter().map(|&i| dataset.records[i].stratum()).collect();
    let mult = oversample(&strata, targets, seed)?;
    let keys: Vec<&str> = members.iter().map(|&i| dataset.records[i].record_id.as_str()).collect();
    let picks = expand(&keys, &mult).into_iter().map(|(k, _)| members[k]).collect();
    Ok((mult, picks))
}

/// Expanded record indices of a balanced split from a dataset manifest.
pub fn split_picks(dataset: &Dataset, split: &BalancedSplit) -> Result<Vec<usize>, DatasetError> {
    let mut keys = Vec::with_capacity(split.multiplicity.len());
    for &(i, _) in &split.multiplicity {
        let r = dataset.records.get(i).ok_or_else(|| DatasetError::Invalid(format!("split names unknown record {i}")))?;
        keys.push(r.record_id.as_str());
    }
    let mult: Vec<usize> = split.multiplicity.iter().map(|&(_, m)| m).collect();
    Ok(expand(&keys, &mult).into_iter().map(|(k, _)| split.multiplicity[k].0).collect())
}

/// Splits by question and balances every non-empty split, producing the
/// manifest for an assembled dataset directory.
pub fn build_manifest(
    dataset: &Dataset,
    stats: AssemblyStats,
    ratios: Ratios,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let assignment = split_questions(dataset.records.iter().map(|r| r.question_id.as_str()), &ratios, seed)?;
    let members = split_records(dataset, &assignment);
    let targets = BalanceTargets::full().restrict_to(&dataset.strata());
    let mut splits = BTreeMap::new();
    for (split, idx) in &members {
        if idx.is_empty() {
            continue;
        }
        let (mult, _) = balance_subset(dataset, idx, &targets, seed)
            .map_err(|source| DatasetError::Balance { split: split.to_string(), source })?;
        let strata: Vec<Stratum> = idx.iter().map(|&i| dataset.records[i].stratum()).collect();
        splits.insert(
            *split,
            BalancedSplit {
                questions: assignment.values().filter(|s| *s == split).count(),
                records: idx.len(),
                counts: StratumCounts::tally(&strata, &mult),
                multiplicity: idx.iter().copied().zip(mult).collect(),
            },
        );
    }
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        ratios,
        sources: dataset
            .stores
            .iter()
            .enumerate()
            .map(|(i, s)| SourceInfo {
                path: source_dir(i),
                model_id: s.manifest.model_id.clone(),
                quantization: s.manifest.quantization,
                dims: s.manifest.dims.clone(),
            })
            .collect(),
        stats,
        records: dataset.records.clone(),
        assignment,
        splits,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::labeled_and_store;
    use super::*;

    #[test]
    fn assemble_joins_and_drops_invalid() {
        let (labeled, store) = labeled_and_store("m", Quantization::Int8, 9, 4);
        let (ds, stats, diags) = assemble(&labeled, vec![store]);
        assert!(diags.is_empty());
        let expected_invalid = labeled.iter().filter(|l| l.label == crate::labeler::Label::Invalid).count();
        assert_eq!(stats.labeled, 36);
        assert_eq!(stats.invalid, expected_invalid);
        assert_eq!(ds.records.len(), 36 - expected_invalid);
        let r = &ds.records[0];
        assert!(r.record_id.starts_with("m/int8/q000/"));
        let (p, s) = r.record_id.rsplit_once('#').unwrap();
        let s: usize = s.parse().unwrap();
        let q = p.trim_start_matches("m/int8/q").split('/').next().unwrap();
        assert_eq!(q, "000");
        let first: Vec<f32> = (0..4).map(|j| (s + j) as f32).collect();
        assert_eq!(ds.features(0, &[StateKind::CevMiddle]).unwrap(), first);
        assert_eq!(ds.input_size(&[StateKind::CevMiddle, StateKind::IavLast]).unwrap(), 8);
    }

    #[test]
    fn missing_rows_are_reported() {
        let (labeled, _) = labeled_and_store("m", Quantization::None, 3, 2);
        let (_, other) = labeled_and_store("other", Quantization::None, 3, 2);
        let (ds, stats, diags) = assemble(&labeled, vec![other]);
        assert!(ds.records.is_empty());
        assert_eq!(stats.missing_rows, diags.len());
    }

    #[test]
    fn manifest_round_trip_and_no_leakage() {
        let (labeled, store) = labeled_and_store("m", Quantization::None, 200, 3);
        let (ds, stats, _) = assemble(&labeled, vec![store]);
        let manifest = build_manifest(&ds, stats, Ratios::default(), 4).unwrap();
        for (split, b) in &manifest.splits {
            for &(i, copies) in &b.multiplicity {
                assert!(copies >= 1);
                assert_eq!(manifest.assignment[&ds.records[i].question_id], *split);
            }
            assert_eq!(b.counts.label[&0], b.counts.label[&1]);
        }
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path(), &manifest).unwrap();
        let (back, m2) = Dataset::open(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back.records, ds.records);
        assert_eq!(back.stores[0].blob(), ds.stores[0].blob());
        let train = &manifest.splits[&Split::Train];
        let picks = split_picks(&back, train).unwrap();
        assert_eq!(picks.len(), train.counts.total);
        assert_eq!(picks.len(), train.multiplicity.iter().map(|m| m.1).sum::<usize>());
    }

    #[test]
    fn merge_renumbers_sources() {
        let (l1, s1) = labeled_and_store("m", Quantization::None, 3, 2);
        let (l2, s2) = labeled_and_store("m", Quantization::Int4, 3, 2);
        let a = assemble(&l1, vec![s1]).0;
        let b = assemble(&l2, vec![s2]).0;
        let merged = Dataset::merge(vec![a, b]);
        assert_eq!(merged.stores.len(), 2);
        for (i, r) in merged.records.iter().enumerate() {
            let expect = if r.quantization == Quantization::Int4 { 1 } else { 0 };
            assert_eq!(r.source, expect);
            merged.features(i, &[StateKind::IavLast]).unwrap();
        }
    }
}
