//! Result tables: probe accuracy grids over state kinds and quantizations,
//! cross-dataset tests, withheld-parameter ablations and hallucination rates.
//!
//! An experiment is described by a TOML spec naming its data sources and the
//! grid to compute. Every cell is an independent train/evaluate job; results
//! come back as a [`Grid`] that serializes to `grid.json` and renders to
//! `grid.txt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::external::{self, LabelRow};
use crate::dataset::{balance_subset, split_questions, split_records, BalanceTargets, Dataset, DatasetRecord, FieldValue, Ratios, Split};
use crate::labeler::{Label, LabeledSentence};
use crate::probe::{self, ProbeConfig, SeedResult, TrainReport};
use crate::prompts::TemplateId;
use crate::states::{Quantization, StateKind};

pub const GRID_JSON: &str = "grid.json";
pub const GRID_TXT: &str = "grid.txt";

/// Allowed distance, in accuracy points, between a reproduced mean and a
/// reference value when the reference gives no explicit tolerance.
pub fn default_tolerance(reference_std: f64) -> f64 {
    3.0_f64.max(2.0 * reference_std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Table,
    CrossTest,
    Ablate,
    Rates,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Table => "table",
            Experiment::CrossTest => "crosstest",
            Experiment::Ablate => "ablate",
            Experiment::Rates => "rates",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Experiment::Table, Experiment::CrossTest, Experiment::Ablate, Experiment::Rates]
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answerability {
    #[default]
    Both,
    Answerable,
    Unanswerable,
}

impl Answerability {
    pub fn admits(self, answerable: Option<bool>) -> bool {
        match self {
            Answerability::Both => true,
            Answerability::Answerable => answerable == Some(true),
            Answerability::Unanswerable => answerable == Some(false),
        }
    }

    fn excluded(self) -> Option<FieldValue> {
        match self {
            Answerability::Both => None,
            Answerability::Answerable => Some(FieldValue::Answerable(false)),
            Answerability::Unanswerable => Some(FieldValue::Answerable(true)),
        }
    }
}

/// One quantization, or all of them pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantSelector {
    All,
    Only(Quantization),
}

impl QuantSelector {
    pub fn admits(self, q: Quantization) -> bool {
        match self {
            QuantSelector::All => true,
            QuantSelector::Only(x) => x == q,
        }
    }
}

impl std::fmt::Display for QuantSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantSelector::All => f.write_str("all"),
            QuantSelector::Only(q) => write!(f, "{q}"),
        }
    }
}

impl std::str::FromStr for QuantSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" => Ok(QuantSelector::All),
            other => other.parse().map(QuantSelector::Only),
        }
    }
}

impl Serialize for QuantSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// State kinds concatenated into one input vector, written `cev_middle+cev_last`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateSet(pub Vec<StateKind>);

impl std::fmt::Display for StateSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|k| k.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

impl std::str::FromStr for StateSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let kinds: Vec<StateKind> = s.split('+').map(str::parse).collect::<Result<_, _>>()?;
        if kinds.is_empty() {
            return Err("empty state set".into());
        }
        Ok(StateSet(kinds))
    }
}

impl Serialize for StateSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    /// Directory written by `assemble`.
    Assembled,
    /// JSONL of records with inline state vectors.
    External,
    /// `labeled.jsonl`; usable for rates only.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Paths {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl Paths {
    pub fn to_vec(&self) -> Vec<PathBuf> {
        match self {
            Paths::One(p) => vec![p.clone()],
            Paths::Many(v) => v.clone(),
        }
    }
}

/// A named data source. Several assembled directories are merged; the
/// format defaults to `assembled` for directories and `external` for files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub path: Paths,
    #[serde(default)]
    pub format: Option<SourceFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub ratios: Ratios,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: Ratios::default(), seed: 0 }
    }
}

/// Which records of the test source are evaluated in a cross test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPool {
    /// Every selected record of the test source.
    #[default]
    All,
    /// Only the test split of the test source.
    TestSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSpec {
    pub train: String,
    pub test: String,
    /// Model id selected in the test source; defaults to the spec's model.
    #[serde(default)]
    pub test_model: Option<String>,
    /// Quantization selected in the test source; defaults to the column's.
    #[serde(default)]
    pub test_quantization: Option<QuantSelector>,
    #[serde(default)]
    pub pool: TestPool,
}

/// A reference value a cell is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub row: String,
    pub column: String,
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

fn default_quants() -> Vec<QuantSelector> {
    let mut v = vec![QuantSelector::All];
    v.extend(Quantization::ALL.map(QuantSelector::Only));
    v
}

fn default_kinds() -> Vec<StateSet> {
    StateKind::ALL.iter().map(|k| StateSet(vec![*k])).collect()
}

fn default_seeds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sources: BTreeMap<String, SourceSpec>,
    /// Source used by table, ablate and rates; optional with one source.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_quants")]
    pub quantizations: Vec<QuantSelector>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<StateSet>,
    #[serde(default)]
    pub answerability: Answerability,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// First probe seed; runs use `seed, seed+1, …`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub cross: Option<CrossSpec>,
    #[serde(default)]
    pub withhold: Vec<FieldValue>,
    #[serde(default)]
    pub reference: Vec<Reference>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Spec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| EvalError::Spec(format!("{}: {e}", path.display())))
    }

    /// Source paths are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for s in self.sources.values_mut() {
            let fix = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
            s.path = match std::mem::replace(&mut s.path, Paths::Many(Vec::new())) {
                Paths::One(p) => Paths::One(fix(p)),
                Paths::Many(v) => Paths::Many(v.into_iter().map(fix).collect()),
            };
        }
    }

    fn main_source(&self) -> Result<String, EvalError> {
        match &self.dataset {
            Some(d) if self.sources.contains_key(d) => Ok(d.clone()),
            Some(d) => Err(EvalError::Spec(format!("dataset {d:?} is not among the sources"))),
            None if self.sources.len() == 1 => Ok(self.sources.keys().next().expect("one source").clone()),
            None => Err(EvalError::Spec("several sources given; name one with `dataset`".into())),
        }
    }

    /// Checks the fields the experiment needs and returns the sources it reads.
    pub fn validate(&self, experiment: Experiment) -> Result<Vec<String>, EvalError> {
        let spec_err = |m: &str| Err(EvalError::Spec(m.to_string()));
        if self.sources.is_empty() {
            return spec_err("no sources given");
        }
        if experiment != Experiment::Rates {
            if self.seeds == 0 {
                return spec_err("seeds must be at least 1");
            }
            if self.kinds.is_empty() || self.quantizations.is_empty() {
                return spec_err("kinds and quantizations must not be empty");
            }
        }
        self.split.ratios.validate().map_err(|e| EvalError::Spec(e.to_string()))?;
        let used = match experiment {
            Experiment::CrossTest => {
                let Some(c) = &self.cross else { return spec_err("crosstest needs a [cross] table") };
                for s in [&c.train, &c.test] {
                    if !self.sources.contains_key(s) {
                        return Err(EvalError::Spec(format!("cross source {s:?} is not among the sources")));
                    }
                }
                vec![c.train.clone(), c.test.clone()]
            }
            Experiment::Ablate => {
                if self.withhold.is_empty() {
                    return spec_err("ablate needs at least one `withhold` entry");
                }
                vec![self.main_source()?]
            }
            Experiment::Table | Experiment::Rates => vec![self.main_source()?],
        };
        if experiment != Experiment::Rates {
            for s in &used {
                if self.format_of(s) == SourceFormat::Labeled {
                    return Err(EvalError::Spec(format!("source {s:?} has no state vectors")));
                }
            }
        }
        Ok(used)
    }

    fn format_of(&self, name: &str) -> SourceFormat {
        let s = &self.sources[name];
        s.format.unwrap_or_else(|| match s.path.to_vec().first() {
            Some(p) if p.is_dir() => SourceFormat::Assembled,
            _ => SourceFormat::External,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("experiment spec: {0}")]
    Spec(String),
    #[error("loading {source_name}: {message}")]
    Load { source_name: String, message: String },
    #[error("{row} / {column}: {message}")]
    Cell { row: String, column: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A loaded source: vectors when it has them, and label rows for rates.
pub struct Loaded {
    pub dataset: Option<Dataset>,
    pub labels: Vec<LabelRow>,
}

fn label_row(r: &DatasetRecord) -> LabelRow {
    LabelRow {
        model_id: r.model_id.clone(),
        quantization: r.quantization,
        template_id: r.template_id,
        label: if r.label == 1 { Label::Hallucinated } else { Label::Grounded },
    }
}

pub fn load_source(name: &str, spec: &ExperimentSpec) -> Result<Loaded, EvalError> {
    let err = |message: String| EvalError::Load { source_name: name.to_string(), message };
    let paths = spec.sources[name].path.to_vec();
    if paths.is_empty() {
        return Err(err("no paths".into()));
    }
    match spec.format_of(name) {
        SourceFormat::Assembled => {
            let mut parts = Vec::new();
            for p in &paths {
                let (ds, _) = Dataset::open(p).map_err(|e| err(e.to_string()))?;
                parts.push(ds);
            }
            let ds = Dataset::merge(parts);
            let labels = ds.records.iter().map(label_row).collect();
            Ok(Loaded { dataset: Some(ds), labels })
        }
        SourceFormat::External => {
            let mut parts = Vec::new();
            let mut labels = Vec::new();
            for p in &paths {
                let ing = external::ingest_file(p).map_err(|e| err(e.to_string()))?;
                for d in &ing.diagnostics {
                    log::warn!("{name}: {d}");
                }
                labels.extend(ing.labels);
                parts.push(ing.dataset);
            }
            Ok(Loaded { dataset: Some(Dataset::merge(parts)), labels })
        }
        SourceFormat::Labeled => {
            let mut labels = Vec::new();
            for p in &paths {
                let rows: Vec<LabeledSentence> = crate::jsonl::read(p).map_err(|e| err(e.to_string()))?;
                labels.extend(rows.into_iter().map(|l| LabelRow {
                    model_id: l.model_id,
                    quantization: l.quantization,
                    template_id: Some(l.template_id),
                    label: l.label,
                }));
            }
            Ok(Loaded { dataset: None, labels })
        }
    }
}

/// Everything that determines one cell's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub dataset: String,
    pub model: Option<String>,
    pub quantization: QuantSelector,
    pub kinds: StateSet,
    pub answerability: Answerability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withheld: Option<FieldValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross: Option<CrossCell>,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub test: String,
    pub test_model: Option<String>,
    pub test_quantization: QuantSelector,
    pub pool: TestPool,
}

/// Balanced record counts of one cell's splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub input_size: usize,
    pub sizes: SplitSizes,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellFailure {
    /// The cell cannot be computed from this data; the run goes on.
    Unavailable(String),
    /// The run must stop.
    Fatal(String),
}

fn selector<'a>(model: &'a Option<String>, q: QuantSelector, a: Answerability) -> impl Fn(&DatasetRecord) -> bool + 'a {
    move |r| model.as_ref().is_none_or(|m| *m == r.model_id) && q.admits(r.quantization) && a.admits(r.answerable)
}

fn base_targets(ds: &Dataset, a: Answerability) -> BalanceTargets {
    let t = BalanceTargets::full().restrict_to(&ds.strata());
    match a.excluded() {
        Some(v) => t.without(v),
        None => t,
    }
}

fn split_of(ds: &Dataset, split: &SplitSpec) -> Result<BTreeMap<Split, Vec<usize>>, CellFailure> {
    let assignment = split_questions(ds.records.iter().map(|r| r.question_id.as_str()), &split.ratios, split.seed)
        .map_err(|e| CellFailure::Unavailable(e.to_string()))?;
    Ok(split_records(ds, &assignment))
}

fn balanced(ds: &Dataset, members: &[usize], targets: &BalanceTargets, seed: u64, what: &str) -> Result<Vec<usize>, String> {
    balance_subset(ds, members, targets, seed).map(|(_, picks)| picks).map_err(|e| format!("{what}: {e}"))
}

/// Trains one network per seed on the cell's train/val data and reports
/// test accuracy.
pub fn run_cell(sources: &BTreeMap<String, Loaded>, cell: &CellSpec) -> Result<CellResult, CellFailure> {
    let fatal = |m: String| CellFailure::Fatal(m);
    let unavailable = |m: String| CellFailure::Unavailable(m);
    let vectors = |name: &str| {
        sources
            .get(name)
            .and_then(|l| l.dataset.as_ref())
            .ok_or_else(|| fatal(format!("source {name:?} is not loaded with state vectors")))
    };
    let ds = vectors(&cell.dataset)?.filter(selector(&cell.model, cell.quantization, cell.answerability));
    if ds.is_empty() {
        return Err(unavailable("no records match the selection".into()));
    }
    let input_size = ds.input_size(&cell.kinds.0).map_err(|e| unavailable(e.to_string()))?;
    let parts = split_of(&ds, &cell.split)?;
    let targets = base_targets(&ds, cell.answerability);
    let seed = cell.split.seed;

    let (fit_targets, fit_members): (BalanceTargets, Vec<Vec<usize>>) = match cell.withheld {
        Some(v) => (
            targets.clone().without(v),
            [Split::Train, Split::Val]
                .iter()
                .map(|s| parts[s].iter().copied().filter(|&i| !v.matches(&ds.records[i].stratum())).collect())
                .collect(),
        ),
        None => (targets.clone(), vec![parts[&Split::Train].clone(), parts[&Split::Val].clone()]),
    };
    let fit_failure = |m: String| if cell.withheld.is_some() { fatal(m) } else { unavailable(m) };
    let train_picks = balanced(&ds, &fit_members[0], &fit_targets, seed, "train").map_err(fit_failure)?;
    let val_picks = balanced(&ds, &fit_members[1], &fit_targets, seed, "val").map_err(fit_failure)?;

    let test_owned;
    let (test_ds, test_picks) = match &cell.cross {
        None => (&ds, balanced(&ds, &parts[&Split::Test], &targets, seed, "test").map_err(unavailable)?),
        Some(c) => {
            test_owned = vectors(&c.test)?.filter(selector(&c.test_model, c.test_quantization, cell.answerability));
            if test_owned.is_empty() {
                return Err(unavailable(format!("no records of {:?} match the selection", c.test)));
            }
            let test_size = test_owned.input_size(&cell.kinds.0).map_err(|e| fatal(e.to_string()))?;
            if test_size != input_size {
                return Err(fatal(format!(
                    "{} has input size {input_size} in {:?} but {test_size} in {:?}",
                    cell.kinds, cell.dataset, c.test
                )));
            }
            let pool = match c.pool {
                TestPool::All => (0..test_owned.records.len()).collect(),
                TestPool::TestSplit => split_of(&test_owned, &cell.split)?.remove(&Split::Test).unwrap_or_default(),
            };
            let t = base_targets(&test_owned, cell.answerability);
            (&test_owned, balanced(&test_owned, &pool, &t, seed, "test").map_err(unavailable)?)
        }
    };

    let samples = |d: &Dataset, picks: &[usize]| d.samples(picks, &cell.kinds.0).map_err(|e| fatal(e.to_string()));
    let train = samples(&ds, &train_picks)?;
    let val = samples(&ds, &val_picks)?;
    let test = samples(test_ds, &test_picks)?;
    let config = ProbeConfig { input_size, ..cell.probe.clone() };
    let (report, _) = probe::train_seeds(&train, &val, &test, &config, &cell.seeds);
    if report.completed == 0 {
        let first = report.seeds.iter().find_map(|s| s.error.clone()).unwrap_or_default();
        return Err(unavailable(format!("every seed failed: {first}")));
    }
    Ok(CellResult { input_size, sizes: SplitSizes { train: train.len(), val: val.len(), test: test.len() }, report })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateCounts {
    pub hallucinated: usize,
    pub valid: usize,
}

impl RateCounts {
    /// Percentage of valid sentences that are hallucinated.
    pub fn percent(&self) -> f64 {
        100.0 * self.hallucinated as f64 / self.valid as f64
    }

    fn add(&mut self, label: Label) {
        match label {
            Label::Hallucinated => {
                self.hallucinated += 1;
                self.valid += 1;
            }
            Label::Grounded => self.valid += 1,
            Label::Invalid => {}
        }
    }
}

/// Column key for a template; records without one are grouped as `unknown`.
pub fn template_key(t: Option<TemplateId>) -> String {
    t.map_or_else(|| "unknown".to_string(), |t| t.as_str().to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateGroup {
    pub overall: RateCounts,
    pub by_template: BTreeMap<String, RateCounts>,
}

/// Rates per (model, quantization), overall and per template.
pub fn hallucination_rates(rows: &[LabelRow]) -> BTreeMap<(String, Quantization), RateGroup> {
    let mut out: BTreeMap<(String, Quantization), RateGroup> = BTreeMap::new();
    for r in rows {
        let g = out.entry((r.model_id.clone(), r.quantization)).or_default();
        g.overall.add(r.label);
        g.by_template.entry(template_key(r.template_id)).or_default().add(r.label);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub expected: f64,
    pub expected_std: f64,
    pub tolerance: f64,
    pub got: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: String,
    pub column: String,
    pub available: bool,
    /// Accuracy or rate in percent.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CellSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<SplitSizes>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<SeedResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateCounts>,
}

impl GridCell {
    fn empty(row: &str, column: &str) -> Self {
        GridCell {
            row: row.to_string(),
            column: column.to_string(),
            available: false,
            mean: None,
            std: None,
            delta: None,
            note: None,
            check: None,
            spec: None,
            input_size: None,
            sizes: None,
            seeds: Vec::new(),
            rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub experiment: Experiment,
    pub title: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<GridCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Grid {
    pub fn cell(&self, row: &str, column: &str) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    pub fn failed_checks(&self) -> Vec<&GridCell> {
        self.cells.iter().filter(|c| c.check.as_ref().is_some_and(|k| !k.passed)).collect()
    }

    pub fn render(&self) -> String {
        let rates = self.experiment == Experiment::Rates;
        let text = |c: Option<&GridCell>| -> String {
            let Some(c) = c else { return String::new() };
            let mut s = match (c.available, c.mean, c.std) {
                (true, Some(m), _) if rates => format!("{m:.2}"),
                (true, Some(m), Some(sd)) => format!("{m:.2}±{sd:.2}"),
                _ => "n/a".to_string(),
            };
            if let Some(d) = c.delta {
                s.push_str(&format!(" ({d:+.2})"));
            }
            if c.check.as_ref().is_some_and(|k| !k.passed) {
                s.push_str(" !");
            }
            s
        };
        let mut table: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect()];
        for r in &self.rows {
            let mut line = vec![r.clone()];
            line.extend(self.columns.iter().map(|c| text(self.cell(r, c))));
            table.push(line);
        }
        let widths: Vec<usize> =
            (0..table[0].len()).map(|i| table.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n\n", self.title);
        for line in &table {
            let cols: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cols.join("  ").trim_end());
            out.push('\n');
        }
        let checks: Vec<&GridCell> = self.cells.iter().filter(|c| c.check.is_some()).collect();
        if !checks.is_empty() {
            out.push_str("\nreference checks\n");
            for c in checks {
                let k = c.check.as_ref().expect("filtered");
                let got = k.got.map_or("n/a".to_string(), |g| format!("{g:.2}"));
                out.push_str(&format!(
                    "  {} / {}: got {got}, expected {:.2} within {:.2}: {}\n",
                    c.row,
                    c.column,
                    k.expected,
                    k.tolerance,
                    if k.passed { "pass" } else { "FAIL" }
                ));
            }
        }
        let notes: Vec<String> = self
            .cells
            .iter()
            .filter_map(|c| c.note.as_ref().map(|n| format!("  {} / {}: {n}", c.row, c.column)))
            .chain(self.notes.iter().map(|n| format!("  {n}")))
            .collect();
        if !notes.is_empty() {
            out.push_str("\nnotes\n");
            for n in notes {
                out.push_str(&n);
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path, source| EvalError::Io { path: path.display().to_string(), source };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("grid serializes");
        let p = dir.join(GRID_JSON);
        std::fs::write(&p, json + "\n").map_err(|e| io(&p, e))?;
        let p = dir.join(GRID_TXT);
        std::fs::write(&p, self.render()).map_err(|e| io(&p, e))
    }

    fn apply_references(&mut self, refs: &[Reference], exact: bool) -> Result<(), EvalError> {
        for r in refs {
            let Some(cell) = self.cells.iter_mut().find(|c| c.row == r.row && c.column == r.column) else {
                return Err(EvalError::Spec(format!("reference names unknown cell {} / {}", r.row, r.column)));
            };
            let tolerance = r.tolerance.unwrap_or(if exact { 0.0 } else { default_tolerance(r.std) });
            let got = cell.mean.filter(|_| cell.available);
            let passed = got.is_some_and(|g| {
                if exact && r.tolerance.is_none() {
                    format!("{g:.2}") == format!("{:.2}", r.mean)
                } else {
                    (g - r.mean).abs() <= tolerance + 1e-9
                }
            });
            cell.check = Some(Check { expected: r.mean, expected_std: r.std, tolerance, got, passed });
        }
        Ok(())
    }
}

struct Planned {
    row: String,
    column: String,
    spec: CellSpec,
}

fn fill(p: &Planned, result: Result<CellResult, CellFailure>) -> Result<GridCell, EvalError> {
    let mut cell = GridCell::empty(&p.row, &p.column);
    cell.spec = Some(p.spec.clone());
    match result {
        Ok(r) => {
            cell.available = true;
            cell.mean = Some(100.0 * r.report.mean_accuracy);
            cell.std = Some(100.0 * r.report.std_accuracy);
            cell.input_size = Some(r.input_size);
            cell.sizes = Some(r.sizes);
            if r.report.completed < r.report.seeds.len() {
                cell.note = Some(format!("{} of {} seeds completed", r.report.completed, r.report.seeds.len()));
            }
            cell.seeds = r.report.seeds;
        }
        Err(CellFailure::Unavailable(m)) => cell.note = Some(m),
        Err(CellFailure::Fatal(message)) => {
            return Err(EvalError::Cell { row: p.row.clone(), column: p.column.clone(), message })
        }
    }
    Ok(cell)
}

fn plan(experiment: Experiment, spec: &ExperimentSpec) -> Result<Vec<Planned>, EvalError> {
    let seeds = probe::seed_list(spec.seed, spec.seeds);
    let base = |dataset: String, q: QuantSelector, kinds: &StateSet| CellSpec {
        dataset,
        model: spec.model.clone(),
        quantization: q,
        kinds: kinds.clone(),
        answerability: spec.answerability,
        withheld: None,
        cross: None,
        split: spec.split,
        seeds: seeds.clone(),
        probe: spec.probe.clone(),
    };
    let mut out = Vec::new();
    match experiment {
        Experiment::Table => {
            let ds = spec.main_source()?;
            for k in &spec.kinds {
                for q in &spec.quantizations {
                    out.push(Planned { row: k.to_string(), column: q.to_string(), spec: base(ds.clone(), *q, k) });
                }
            }
        }
        Experiment::CrossTest => {
            let c = spec.cross.as_ref().expect("validated");
            for k in &spec.kinds {
                for q in &spec.quantizations {
                    let mut s = base(c.train.clone(), *q, k);
                    s.cross = Some(CrossCell {
                        test: c.test.clone(),
                        test_model: c.test_model.clone().or_else(|| spec.model.clone()),
                        test_quantization: c.test_quantization.unwrap_or(*q),
                        pool: c.pool,
                    });
                    out.push(Planned { row: k.to_string(), column: q.to_string(), spec: s });
                }
            }
        }
        Experiment::Ablate => {
            let ds = spec.main_source()?;
            let one_kind = spec.kinds.len() == 1;
            let name = |k: &StateSet, w: &str| if one_kind { w.to_string() } else { format!("{k} {w}") };
            for k in &spec.kinds {
                let withheld = std::iter::once(None).chain(spec.withhold.iter().copied().map(Some));
                for w in withheld {
                    let label = w.map_or("none".to_string(), |v| v.to_string());
                    for q in &spec.quantizations {
                        let mut s = base(ds.clone(), *q, k);
                        s.withheld = w;
                        out.push(Planned { row: name(k, &label), column: q.to_string(), spec: s });
                    }
                }
            }
        }
        Experiment::Rates => unreachable!("rates have no training cells"),
    }
    Ok(out)
}

fn rows_and_columns(cells: &[GridCell]) -> (Vec<String>, Vec<String>) {
    let mut rows: Vec<String> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row) {
            rows.push(c.row.clone());
        }
        if !columns.contains(&c.column) {
            columns.push(c.column.clone());
        }
    }
    (rows, columns)
}

/// Rate grid: one row per (model, quantization), an `all` column and one
/// column per template. Groups without valid sentences are left out with a
/// note.
pub fn rates_grid(rows: &[LabelRow], model: Option<&str>) -> Grid {
    let groups = hallucination_rates(rows);
    let mut cells = Vec::new();
    let mut notes = Vec::new();
    let mut templates: Vec<String> = groups.values().flat_map(|g| g.by_template.keys().cloned()).collect();
    templates.sort();
    templates.dedup();
    for ((m, q), g) in &groups {
        if model.is_some_and(|x| x != m) {
            continue;
        }
        let row = format!("{m}/{q}");
        for (column, counts) in std::iter::once(("all".to_string(), g.overall)).chain(g.by_template.clone()) {
            if counts.valid == 0 {
                notes.push(format!("{row} / {column}: no valid sentences, omitted"));
                continue;
            }
            let mut c = GridCell::empty(&row, &column);
            c.available = true;
            c.mean = Some(counts.percent());
            c.rate = Some(counts);
            cells.push(c);
        }
    }
    let (rows, _) = rows_and_columns(&cells);
    let columns = std::iter::once("all".to_string()).chain(templates).collect();
    Grid { experiment: Experiment::Rates, title: "hallucination rates (%)".into(), rows, columns, cells, notes }
}

/// Loads the sources an experiment needs and computes its grid.
pub fn run(experiment: Experiment, spec: &ExperimentSpec) -> Result<Grid, EvalError> {
    let used = spec.validate(experiment)?;
    let mut sources = BTreeMap::new();
    for name in &used {
        if !sources.contains_key(name) {
            log::info!("loading source {name}");
            sources.insert(name.clone(), load_source(name, spec)?);
        }
    }
    run_loaded(experiment, spec, &sources)
}

/// Computes a grid from already loaded sources.
pub fn run_loaded(experiment: Experiment, spec: &ExperimentSpec, sources: &BTreeMap<String, Loaded>) -> Result<Grid, EvalError> {
    if experiment == Experiment::Rates {
        let name = spec.main_source()?;
        let loaded = sources.get(&name).ok_or_else(|| EvalError::Spec(format!("source {name:?} not loaded")))?;
        let mut grid = rates_grid(&loaded.labels, spec.model.as_deref());
        grid.apply_references(&spec.reference, true)?;
        return Ok(grid);
    }
    let planned = plan(experiment, spec)?;
    let results: Vec<Result<CellResult, CellFailure>> = planned
        .par_iter()
        .map(|p| {
            log::info!("cell {} / {}", p.row, p.column);
            run_cell(sources, &p.spec)
        })
        .collect();
    let mut cells = Vec::with_capacity(planned.len());
    for (p, r) in planned.iter().zip(results) {
        cells.push(fill(p, r)?);
    }
    if experiment == Experiment::Ablate {
        for i in 0..cells.len() {
            let reference = {
                let s = cells[i].spec.as_ref().expect("planned");
                cells.iter().find(|c| {
                    let t = c.spec.as_ref().expect("planned");
                    t.withheld.is_none() && t.kinds == s.kinds && t.quantization == s.quantization
                })
            };
            let delta = match (cells[i].mean, reference.and_then(|r| r.mean)) {
                (Some(m), Some(r)) => Some(m - r),
                _ => None,
            };
            cells[i].delta = delta;
        }
    }
    let (rows, columns) = rows_and_columns(&cells);
    let title = match experiment {
        Experiment::Table => format!("test accuracy (%), {} seeds", spec.seeds),
        Experiment::CrossTest => {
            let c = spec.cross.as_ref().expect("validated");
            format!("test accuracy (%), trained on {} and tested on {}, {} seeds", c.train, c.test, spec.seeds)
        }
        Experiment::Ablate => format!("test accuracy (%) with parameters withheld from training, {} seeds", spec.seeds),
        Experiment::Rates => unreachable!(),
    };
    let mut grid = Grid { experiment, title, rows, columns, cells, notes: Vec::new() };
    grid.apply_references(&spec.reference, false)?;
    Ok(grid)
}
