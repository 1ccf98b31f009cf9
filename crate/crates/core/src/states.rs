//! Internal-state files produced by the capture shim.
//!
//! A capture directory holds three files:
//! - `responses.jsonl`: one [`ResponseRecord`] per prompt;
//! - `states.bin`: raw little-endian f32 rows, one row per generated
//!   sentence, each row the concatenation of the manifest's kinds in order;
//! - `states_manifest.json`: a [`StatesManifest`] with per-kind dimensions
//!   and one byte range per row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::segment::split_sentences;

pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const STATES_FILE: &str = "states.bin";
pub const MANIFEST_FILE: &str = "states_manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    CevMiddle,
    CevLast,
    IavMiddle,
    IavLast,
}

impl StateKind {
    pub const ALL: [StateKind; 4] = [StateKind::CevMiddle, StateKind::CevLast, StateKind::IavMiddle, StateKind::IavLast];

    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::CevMiddle => "cev_middle",
            StateKind::CevLast => "cev_last",
            StateKind::IavMiddle => "iav_middle",
            StateKind::IavLast => "iav_last",
        }
    }

    /// Display label in result tables, e.g. `cev (middle)`.
    pub fn label(self) -> &'static str {
        match self {
            StateKind::CevMiddle => "cev (middle)",
            StateKind::CevLast => "cev (last)",
            StateKind::IavMiddle => "iav (middle)",
            StateKind::IavLast => "iav (last)",
        }
    }
}

impl std::str::FromStr for StateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| format!("unknown state kind {s:?}"))
    }
}

impl std::fmt::Display for StateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses `cev_middle,iav_last`.
pub fn parse_kinds(s: &str) -> Result<Vec<StateKind>, String> {
    let kinds: Vec<StateKind> = s.split(',').map(str::parse).collect::<Result<_, _>>()?;
    if kinds.is_empty() {
        return Err("no state kinds given".into());
    }
    Ok(kinds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    None,
    Float8,
    Int8,
    Int4,
}

impl Quantization {
    pub const ALL: [Quantization; 4] = [Quantization::None, Quantization::Float8, Quantization::Int8, Quantization::Int4];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantization::None => "none",
            Quantization::Float8 => "float8",
            Quantization::Int8 => "int8",
            Quantization::Int4 => "int4",
        }
    }
}

impl std::str::FromStr for Quantization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Quantization::ALL
            .into_iter()
            .find(|q| q.as_str() == s.trim())
            .ok_or_else(|| format!("unknown quantization {s:?}"))
    }
}

impl std::fmt::Display for Quantization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Middle and last decoder block indices for a model with `num_blocks`
/// blocks: `floor(L/2)` and `L-1`.
pub fn block_indices(num_blocks: usize) -> (usize, usize) {
    (num_blocks / 2, num_blocks.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSentence {
    pub index: usize,
    pub text: String,
    /// Byte span in the response text.
    pub start: usize,
    pub end: usize,
    /// Token span `[start, end)`; states are taken at `end - 1`.
    #[serde(default)]
    pub token_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub prompt_ref: String,
    pub model_id: String,
    pub quantization: Quantization,
    pub response: String,
    pub sentences: Vec<ResponseSentence>,
    /// Set when generation hit the token limit and the tail was cut back to
    /// the last complete sentence.
    #[serde(default)]
    pub truncated: bool,
}

impl ResponseRecord {
    pub fn new(prompt_ref: &str, model_id: &str, quantization: Quantization, response: &str) -> Self {
        Self {
            prompt_ref: prompt_ref.into(),
            model_id: model_id.into(),
            quantization,
            response: response.into(),
            sentences: segment_response(response),
            truncated: false,
        }
    }

    /// Checks that the sentence list is exactly the segmentation of the
    /// response text.
    pub fn check_sentences(&self) -> Result<(), String> {
        let expected = segment_response(&self.response);
        if expected.len() != self.sentences.len() {
            return Err(format!(
                "{}: {} sentences recorded, segmentation gives {}",
                self.prompt_ref,
                self.sentences.len(),
                expected.len()
            ));
        }
        for (e, s) in expected.iter().zip(&self.sentences) {
            if (e.index, &e.text, e.start, e.end) != (s.index, &s.text, s.start, s.end) {
                return Err(format!("{}: sentence {} does not match segmentation", self.prompt_ref, s.index));
            }
        }
        Ok(())
    }
}

pub fn segment_response(response: &str) -> Vec<ResponseSentence> {
    split_sentences(response)
        .into_iter()
        .enumerate()
        .map(|(index, span)| ResponseSentence {
            index,
            text: span.slice(response).to_string(),
            start: span.start,
            end: span.end,
            token_span: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub prompt_ref: String,
    pub sentence_index: usize,
    /// Byte offset into `states.bin`.
    pub offset: u64,
    /// Row length in bytes.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatesManifest {
    pub format_version: u32,
    pub model_id: String,
    pub quantization: Quantization,
    #[serde(default)]
    pub num_decoder_blocks: Option<usize>,
    /// Row layout: the vectors of these kinds, concatenated in this order.
    pub kinds: Vec<StateKind>,
    pub dims: BTreeMap<StateKind, usize>,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum StatesError {
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
    #[error(transparent)]
    Jsonl(#[from] crate::jsonl::JsonlError),
    #[error("invalid states manifest: {0}")]
    Invalid(String),
    #[error("state kind {0} not captured")]
    MissingKind(StateKind),
    #[error("row {prompt_ref}#{sentence_index} not in manifest")]
    MissingRow { prompt_ref: String, sentence_index: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl StatesManifest {
    pub fn row_dim(&self) -> usize {
        self.kinds.iter().map(|k| self.dims.get(k).copied().unwrap_or(0)).sum()
    }

    /// Float offset and length of `kind` inside a row.
    pub fn kind_range(&self, kind: StateKind) -> Option<(usize, usize)> {
        let mut at = 0;
        for k in &self.kinds {
            let d = *self.dims.get(k)?;
            if *k == kind {
                return Some((at, d));
            }
            at += d;
        }
        None
    }

    /// Offsets must start at zero, be contiguous and strictly increasing,
    /// have the row length implied by the dims, and end at `blob_len`.
    pub fn validate(&self, blob_len: u64) -> Result<(), StatesError> {
        if self.format_version != FORMAT_VERSION {
            return Err(StatesError::Invalid(format!("unsupported format version {}", self.format_version)));
        }
        for k in &self.kinds {
            match self.dims.get(k) {
                Some(&d) if d > 0 => {}
                _ => return Err(StatesError::Invalid(format!("kind {k} has no positive dimension"))),
            }
        }
        let mut seen = std::collections::HashSet::new();
        for k in &self.kinds {
            if !seen.insert(k) {
                return Err(StatesError::Invalid(format!("kind {k} listed twice")));
            }
        }
        let row_bytes = (self.row_dim() * 4) as u64;
        let mut expected = 0u64;
        for r in &self.records {
            if r.offset != expected {
                return Err(StatesError::Invalid(format!(
                    "row {}#{} starts at {} but previous row ends at {}",
                    r.prompt_ref, r.sentence_index, r.offset, expected
                )));
            }
            if r.length != row_bytes {
                return Err(StatesError::Invalid(format!(
                    "row {}#{} has {} bytes, expected {}",
                    r.prompt_ref, r.sentence_index, r.length, row_bytes
                )));
            }
            expected += r.length;
        }
        if expected != blob_len {
            return Err(StatesError::Invalid(format!("rows cover {expected} bytes, blob has {blob_len}")));
        }
        Ok(())
    }
}

/// A validated manifest with its blob in memory.
#[derive(Debug, Clone)]
pub struct StateStore {
    pub manifest: StatesManifest,
    blob: Vec<u8>,
    index: std::collections::HashMap<(String, usize), usize>,
}

impl StateStore {
    pub fn new(manifest: StatesManifest, blob: Vec<u8>) -> Result<Self, StatesError> {
        manifest.validate(blob.len() as u64)?;
        let index = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.prompt_ref.clone(), r.sentence_index), i))
            .collect();
        Ok(Self { manifest, blob, index })
    }

    pub fn open(dir: &Path) -> Result<Self, StatesError> {
        let mpath = dir.join(MANIFEST_FILE);
        let bpath = dir.join(STATES_FILE);
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| StatesError::Io { path, source }
        };
        let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let manifest: StatesManifest = serde_json::from_str(&text)
            .map_err(|source| StatesError::Json { path: mpath.display().to_string(), source })?;
        let blob = fs::read(&bpath).map_err(io(&bpath))?;
        Self::new(manifest, blob)
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn row_index(&self, prompt_ref: &str, sentence_index: usize) -> Option<usize> {
        self.index.get(&(prompt_ref.to_string(), sentence_index)).copied()
    }

    /// The full row of record `i` as floats.
    pub fn row(&self, i: usize) -> Vec<f32> {
        let r = &self.manifest.records[i];
        decode_f32(&self.blob[r.offset as usize..(r.offset + r.length) as usize])
    }

    pub fn vector(&self, i: usize, kind: StateKind) -> Result<Vec<f32>, StatesError> {
        let (at, d) = self.manifest.kind_range(kind).ok_or(StatesError::MissingKind(kind))?;
        let r = &self.manifest.records[i];
        let start = r.offset as usize + at * 4;
        Ok(decode_f32(&self.blob[start..start + d * 4]))
    }

    /// Concatenation of the requested kinds for record `i`.
    pub fn features(&self, i: usize, kinds: &[StateKind]) -> Result<Vec<f32>, StatesError> {
        let mut out = Vec::with_capacity(kinds.iter().map(|k| self.manifest.dims.get(k).copied().unwrap_or(0)).sum());
        for &k in kinds {
            out.extend(self.vector(i, k)?);
        }
        Ok(out)
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Builds a capture directory row by row.
pub struct StatesWriter {
    manifest: StatesManifest,
    blob: Vec<u8>,
}

impl StatesWriter {
    pub fn new(model_id: &str, quantization: Quantization, dims: &[(StateKind, usize)]) -> Self {
        Self {
            manifest: StatesManifest {
                format_version: FORMAT_VERSION,
                model_id: model_id.into(),
                quantization,
                num_decoder_blocks: None,
                kinds: dims.iter().map(|(k, _)| *k).collect(),
                dims: dims.iter().copied().collect(),
                records: Vec::new(),
            },
            blob: Vec::new(),
        }
    }

    pub fn with_blocks(mut self, num_blocks: usize) -> Self {
        self.manifest.num_decoder_blocks = Some(num_blocks);
        self
    }

    /// Appends one row; `vectors` must follow the kind order given to `new`.
    pub fn push(&mut self, prompt_ref: &str, sentence_index: usize, vectors: &[&[f32]]) -> Result<(), StatesError> {
        if vectors.len() != self.manifest.kinds.len() {
            return Err(StatesError::Dimension(format!(
                "{} vectors for {} kinds",
                vectors.len(),
                self.manifest.kinds.len()
            )));
        }
        for (k, v) in self.manifest.kinds.iter().zip(vectors) {
            if v.len() != self.manifest.dims[k] {
                return Err(StatesError::Dimension(format!("{k}: got {}, manifest says {}", v.len(), self.manifest.dims[k])));
            }
        }
        let offset = self.blob.len() as u64;
        for v in vectors {
            for x in v.iter() {
                self.blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.manifest.records.push(ManifestRecord {
            prompt_ref: prompt_ref.into(),
            sentence_index,
            offset,
            length: self.blob.len() as u64 - offset,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<StateStore, StatesError> {
        StateStore::new(self.manifest, self.blob)
    }

    pub fn write(self, dir: &Path) -> Result<StateStore, StatesError> {
        let store = self.finish()?;
        write_store(&store, dir)?;
        Ok(store)
    }
}

pub fn write_store(store: &StateStore, dir: &Path) -> Result<(), StatesError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| StatesError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let bpath = dir.join(STATES_FILE);
    fs::write(&bpath, store.blob()).map_err(io(&bpath))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&store.manifest)
        .map_err(|source| StatesError::Json { path: mpath.display().to_string(), source })?;
    fs::write(&mpath, text).map_err(io(&mpath))
}

/// Concatenates shard stores produced by parallel capture processes. All
/// shards must share model, quantization and row layout.
pub fn merge_shards(shards: Vec<StateStore>) -> Result<StateStore, StatesError> {
    let mut iter = shards.into_iter();
    let first = iter.next().ok_or_else(|| StatesError::Invalid("no shards to merge".into()))?;
    let mut manifest = first.manifest;
    let mut blob = first.blob;
    for s in iter {
        let m = s.manifest;
        if (m.model_id.as_str(), m.quantization, &m.kinds, &m.dims)
            != (manifest.model_id.as_str(), manifest.quantization, &manifest.kinds, &manifest.dims)
        {
            return Err(StatesError::Invalid("shards disagree on model or layout".into()));
        }
        let shift = blob.len() as u64;
        manifest.records.extend(m.records.into_iter().map(|r| ManifestRecord { offset: r.offset + shift, ..r }));
        blob.extend(s.blob);
    }
    StateStore::new(manifest, blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_indices_for_32_blocks() {
        assert_eq!(block_indices(32), (16, 31));
        assert_eq!(block_indices(40), (20, 39));
        assert_eq!(block_indices(1), (0, 0));
    }

    #[test]
    fn round_trip_and_kind_slicing() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = StatesWriter::new("m", Quantization::Int8, &[(StateKind::CevMiddle, 3), (StateKind::IavLast, 2)]);
        w.push("p0/a", 0, &[&[1.0, 2.0, 3.0], &[4.0, 5.0]]).unwrap();
        w.push("p0/a", 1, &[&[-1.0, -2.0, -3.0], &[0.5, 0.25]]).unwrap();
        w.write(dir.path()).unwrap();
        let s = StateStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.vector(1, StateKind::IavLast).unwrap(), vec![0.5, 0.25]);
        assert_eq!(s.features(0, &[StateKind::IavLast, StateKind::CevMiddle]).unwrap(), vec![4.0, 5.0, 1.0, 2.0, 3.0]);
        assert!(matches!(s.vector(0, StateKind::CevLast), Err(StatesError::MissingKind(_))));
        assert_eq!(s.row_index("p0/a", 1), Some(1));
        assert_eq!(s.manifest.records[1].length, 5 * 4);
    }

    #[test]
    fn wrong_dimension_is_refused() {
        let mut w = StatesWriter::new("m", Quantization::None, &[(StateKind::CevLast, 4)]);
        assert!(matches!(w.push("p", 0, &[&[1.0]]), Err(StatesError::Dimension(_))));
    }

    #[test]
    fn gaps_and_overlaps_are_detected() {
        let mut w = StatesWriter::new("m", Quantization::None, &[(StateKind::CevLast, 2)]);
        w.push("p", 0, &[&[1.0, 2.0]]).unwrap();
        w.push("p", 1, &[&[1.0, 2.0]]).unwrap();
        let s = w.finish().unwrap();
        let mut m = s.manifest.clone();
        m.records[1].offset = 4;
        assert!(m.validate(16).is_err());
        let m = s.manifest.clone();
        assert!(m.validate(20).is_err());
        assert!(s.manifest.validate(16).is_ok());
    }

    #[test]
    fn shards_merge_with_shifted_offsets() {
        let mk = |p: &str| {
            let mut w = StatesWriter::new("m", Quantization::Int4, &[(StateKind::CevLast, 2)]);
            w.push(p, 0, &[&[1.0, 2.0]]).unwrap();
            w.push(p, 1, &[&[3.0, 4.0]]).unwrap();
            w.finish().unwrap()
        };
        let merged = merge_shards(vec![mk("a"), mk("b")]).unwrap();
        assert_eq!(merged.len(), 4);
        assert_eq!(merged.manifest.records[2].offset, 16);
        assert_eq!(merged.row(3), vec![3.0, 4.0]);
    }

    #[test]
    fn response_sentences_follow_segmentation() {
        let r = ResponseRecord::new("p", "m", Quantization::None, "The bridge opened in 2024. It is long.");
        assert_eq!(r.sentences.len(), 2);
        assert!(r.check_sentences().is_ok());
        let mut bad = r.clone();
        bad.sentences.pop();
        assert!(bad.check_sentences().is_err());
    }

    proptest! {
        #[test]
        fn sentences_reconstruct_response(text in "[A-Za-z ,.!?0-9]{0,300}") {
            let s = segment_response(&text);
            let joined = s.iter().map(|x| x.text.as_str()).collect::<Vec<_>>().join(" ");
            let norm = |t: &str| t.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(norm(&joined), norm(&text));
        }

        #[test]
        fn manifest_offsets_cover_blob(rows in 1usize..20, d1 in 1usize..8, d2 in 1usize..8) {
            let mut w = StatesWriter::new("m", Quantization::None, &[(StateKind::CevMiddle, d1), (StateKind::IavMiddle, d2)]);
            for i in 0..rows {
                let a = vec![i as f32; d1];
                let b = vec![-(i as f32); d2];
                w.push("p", i, &[&a, &b]).unwrap();
            }
            let s = w.finish().unwrap();
            let recs = &s.manifest.records;
            for pair in recs.windows(2) {
                prop_assert!(pair[1].offset > pair[0].offset);
                prop_assert_eq!(pair[0].offset + pair[0].length, pair[1].offset);
            }
            prop_assert_eq!(recs.last().map(|r| r.offset + r.length), Some(s.blob().len() as u64));
            for r in recs {
                prop_assert_eq!(r.length as usize, (d1 + d2) * 4);
            }
        }
    }
}
