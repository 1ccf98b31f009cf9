//! Stage runners and the configured end-to-end run.
//!
//! Each stage reads declared input files and writes declared output files.
//! [`run_pipeline`] executes the enabled stages in order, stages outputs in a
//! scratch directory until the stage succeeds, and records input and output
//! digests in `run_manifest.json` so an unchanged stage is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::{Caller, ChatClient, HttpChatClient, RateLimiter, RecordingClient, ReplayClient, RetryPolicy};
use crate::dataset::{self, Dataset, Ratios, Split};
use crate::eval::{self, Experiment, ExperimentSpec, Grid, StateSet};
use crate::harvest::{self, SentenceCandidate};
use crate::labeler::{self, JudgeSettings, LabeledSentence};
use crate::probe::{self, checkpoint, ProbeConfig, TrainReport};
use crate::prompts::{self, RagPrompt};
use crate::qa::{self, QaPair, QaSettings};
use crate::states::{self, ResponseRecord, StateKind, StateStore};
use crate::{jsonl, Diagnostic};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Harvest,
    Qagen,
    Prompts,
    Label,
    Assemble,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Harvest, Stage::Qagen, Stage::Prompts, Stage::Label, Stage::Assemble, Stage::Train, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Harvest => "harvest",
            Stage::Qagen => "qagen",
            Stage::Prompts => "prompts",
            Stage::Label => "label",
            Stage::Assemble => "assemble",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    /// Stages that call the chat endpoint.
    pub fn is_networked(self) -> bool {
        matches!(self, Stage::Qagen | Stage::Label)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|x| x.as_str() == s.trim()).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Parses `train,eval`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>, String> {
    let mut v: Vec<Stage> = s.split(',').map(str::parse).collect::<Result<_, _>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    #[serde(default = "default_true")]
    pub harvest: bool,
    #[serde(default = "default_true")]
    pub qagen: bool,
    #[serde(default = "default_true")]
    pub prompts: bool,
    #[serde(default = "default_true")]
    pub label: bool,
    #[serde(default = "default_true")]
    pub assemble: bool,
    #[serde(default = "default_true")]
    pub train: bool,
    #[serde(default = "default_true")]
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { harvest: true, qagen: true, prompts: true, label: true, assemble: true, train: true, eval: true }
    }
}

impl StageToggles {
    pub fn enabled(&self) -> Vec<Stage> {
        let on = [self.harvest, self.qagen, self.prompts, self.label, self.assemble, self.train, self.eval];
        Stage::ALL.into_iter().zip(on).filter(|(_, on)| *on).map(|(s, _)| s).collect()
    }

    pub fn only(stages: &[Stage]) -> Self {
        let has = |s| stages.contains(&s);
        Self {
            harvest: has(Stage::Harvest),
            qagen: has(Stage::Qagen),
            prompts: has(Stage::Prompts),
            label: has(Stage::Label),
            assemble: has(Stage::Assemble),
            train: has(Stage::Train),
            eval: has(Stage::Eval),
        }
    }
}

fn default_timeout() -> u64 {
    120
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Chat-completions URL; not needed when replaying.
    #[serde(default)]
    pub url: Option<String>,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Burst size and refill rate of the request token bucket.
    #[serde(default)]
    pub rate_capacity: Option<u32>,
    #[serde(default)]
    pub rate_per_second: Option<f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Serve responses from a transcript file instead of the network.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    /// Append every exchange to a transcript file.
    #[serde(default)]
    pub record: Option<PathBuf>,
}

impl EndpointConfig {
    fn check(&self) -> Result<(), String> {
        if self.model.trim().is_empty() {
            return Err("endpoint.model is empty".into());
        }
        if self.url.is_none() && self.replay.is_none() {
            return Err("endpoint needs a url or a replay transcript".into());
        }
        if self.parallelism == 0 {
            return Err("endpoint.parallelism must be at least 1".into());
        }
        if self.rate_per_second.is_some_and(|r| !(r > 0.0)) {
            return Err("endpoint.rate_per_second must be positive".into());
        }
        Ok(())
    }

    fn limiter(&self) -> Option<RateLimiter> {
        self.rate_per_second.map(|r| RateLimiter::new(self.rate_capacity.unwrap_or(1), r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub articles: PathBuf,
    pub candidates: PathBuf,
    pub qa: PathBuf,
    pub prompts: PathBuf,
    /// Capture directories written by the external state-capture tool.
    pub captures: Vec<PathBuf>,
    pub labeled: PathBuf,
    pub dataset: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            articles: "articles.jsonl".into(),
            candidates: "candidates.jsonl".into(),
            qa: "qa.jsonl".into(),
            prompts: "prompts.jsonl".into(),
            captures: Vec::new(),
            labeled: "labeled.jsonl".into(),
            dataset: "dataset".into(),
            train: "train".into(),
            eval: "eval".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssembleConfig {
    pub ratios: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kinds: StateSet,
    pub seeds: usize,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { kinds: StateSet(vec![StateKind::CevMiddle]), seeds: 10, probe: ProbeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_experiment")]
    pub experiment: Experiment,
    pub spec: PathBuf,
}

fn default_experiment() -> Experiment {
    Experiment::Table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Only articles created after this date are harvested.
    #[serde(default)]
    pub cutoff: Option<NaiveDate>,
    /// Directory that relative paths are resolved against.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub assemble: AssembleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage {stage}: missing input {path}")]
    MissingInput { stage: Stage, path: String },
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    fn stage(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.work_dir = Some(match cfg.work_dir.take() {
            Some(w) if w.is_absolute() => w,
            Some(w) => base.join(w),
            None => base.to_path_buf(),
        });
        Ok(cfg)
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn at(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir().join(p)
        }
    }

    /// Checks that every enabled stage has what it needs, before anything runs.
    pub fn validate(&self, stages: &[Stage]) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        for &s in stages {
            if s.is_networked() {
                match &self.endpoint {
                    None => return err(format!("{s} needs an [endpoint] section")),
                    Some(e) => e.check().map_err(|m| PipelineError::Config(format!("{s}: {m}")))?,
                }
            }
            match s {
                Stage::Harvest if self.cutoff.is_none() => return err("harvest needs a cutoff date".into()),
                Stage::Label | Stage::Assemble if self.paths.captures.is_empty() => {
                    return err(format!("{s} needs paths.captures"))
                }
                Stage::Train if self.train.seeds == 0 => return err("train.seeds must be at least 1".into()),
                Stage::Eval if self.eval.is_none() => return err("eval needs an [eval] section with a spec".into()),
                _ => {}
            }
        }
        self.assemble.ratios.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn sha256(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's sorted (relative path, file digest)
/// listing.
pub fn digest_path(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, p) in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(sha256_hex(&std::fs::read(&p)?).as_bytes());
            h.update([b'\n']);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_hex(&std::fs::read(path)?))
    }
}

/// Line counts and diagnostics of one stage execution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub records: usize,
    pub diagnostics: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance_failures: Option<usize>,
}

fn write_diagnostics(path: &Path, diagnostics: &[Diagnostic]) -> Result<(), String> {
    for d in diagnostics.iter().take(20) {
        log::warn!("{d}");
    }
    if diagnostics.len() > 20 {
        log::warn!("{} more diagnostics in {}", diagnostics.len() - 20, path.display());
    }
    jsonl::write(path, diagnostics).map_err(|e| e.to_string())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    jsonl::read(path).map_err(|e| e.to_string())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), String> {
    jsonl::write(path, items).map_err(|e| e.to_string())
}

/// Diagnostics path next to a JSONL output: `qa.jsonl` → `qa.diagnostics.jsonl`.
pub fn diagnostics_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.{DIAGNOSTICS_FILE}"))
}

pub fn harvest_files(articles: &Path, cutoff: NaiveDate, output: &Path) -> Result<StageSummary, String> {
    let snapshots = harvest::read_snapshots(articles).map_err(|e| e.to_string())?;
    let ex = harvest::harvest(snapshots, cutoff);
    write_jsonl(output, &ex.candidates)?;
    write_diagnostics(&diagnostics_path(output), &ex.diagnostics)?;
    Ok(StageSummary { records: ex.candidates.len(), diagnostics: ex.diagnostics.len(), tolerance_failures: None })
}

pub fn qagen_files(
    candidates: &Path,
    output: &Path,
    caller: &Caller<'_>,
    settings: &QaSettings,
    parallelism: usize,
) -> Result<StageSummary, String> {
    let cands: Vec<SentenceCandidate> = read_jsonl(candidates)?;
    let (pairs, diags) = qa::generate_all(&cands, caller, settings, parallelism);
    write_jsonl(output, &pairs)?;
    write_diagnostics(&diagnostics_path(output), &diags)?;
    Ok(StageSummary { records: pairs.len(), diagnostics: diags.len(), tolerance_failures: None })
}

pub fn prompts_files(qa: &Path, candidates: &Path, seed: u64, output: &Path) -> Result<StageSummary, String> {
    let pairs: Vec<QaPair> = read_jsonl(qa)?;
    let cands: Vec<SentenceCandidate> = read_jsonl(candidates)?;
    let (prompts, diags) = prompts::build_all(&pairs, &cands, seed);
    write_jsonl(output, &prompts)?;
    write_diagnostics(&diagnostics_path(output), &diags)?;
    Ok(StageSummary { records: prompts.len(), diagnostics: diags.len(), tolerance_failures: None })
}

pub fn label_files(
    responses: &[PathBuf],
    prompts: &Path,
    output: &Path,
    caller: &Caller<'_>,
    settings: &JudgeSettings,
    parallelism: usize,
) -> Result<StageSummary, String> {
    let mut all: Vec<ResponseRecord> = Vec::new();
    for r in responses {
        all.extend(read_jsonl::<ResponseRecord>(r)?);
    }
    let prompts: Vec<RagPrompt> = read_jsonl(prompts)?;
    let (labeled, diags) = labeler::label_all(&all, &prompts, caller, settings, parallelism);
    write_jsonl(output, &labeled)?;
    write_diagnostics(&diagnostics_path(output), &diags)?;
    for ((m, q), c) in labeler::label_counts(&labeled) {
        log::info!("{m}/{q}: {} sentences, {} valid ({:.2}%), {} hallucinated", c.total, c.valid, c.valid_percent(), c.hallucinated);
    }
    Ok(StageSummary { records: labeled.len(), diagnostics: diags.len(), tolerance_failures: None })
}

pub fn assemble_files(
    labeled: &Path,
    captures: &[PathBuf],
    ratios: Ratios,
    seed: u64,
    output: &Path,
) -> Result<StageSummary, String> {
    let labeled: Vec<LabeledSentence> = read_jsonl(labeled)?;
    let stores: Vec<StateStore> =
        captures.iter().map(|d| StateStore::open(d).map_err(|e| format!("{}: {e}", d.display()))).collect::<Result<_, _>>()?;
    let (ds, stats, diags) = dataset::assemble(&labeled, stores);
    let manifest = dataset::build_manifest(&ds, stats, ratios, seed).map_err(|e| e.to_string())?;
    ds.write(output, &manifest).map_err(|e| e.to_string())?;
    write_diagnostics(&output.join(DIAGNOSTICS_FILE), &diags)?;
    for (s, b) in &manifest.splits {
        log::info!("{s}: {} questions, {} records, {} after balancing", b.questions, b.records, b.counts.total);
    }
    Ok(StageSummary { records: ds.records.len(), diagnostics: diags.len(), tolerance_failures: None })
}

/// `report.json` of the train stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub kinds: StateSet,
    pub sizes: eval::SplitSizes,
    pub report: TrainReport,
    /// Checkpoint file per seed, `None` for seeds that failed.
    pub checkpoints: Vec<Option<String>>,
}

/// Trains on a dataset directory's balanced splits and writes `report.json`
/// plus one checkpoint per seed.
pub fn train_files(
    dataset_dir: &Path,
    kinds: &StateSet,
    probe_config: &ProbeConfig,
    seeds: &[u64],
    output: &Path,
) -> Result<TrainOutput, String> {
    let (ds, manifest) = Dataset::open(dataset_dir).map_err(|e| e.to_string())?;
    let input_size = ds.input_size(&kinds.0).map_err(|e| e.to_string())?;
    let samples = |split: Split| -> Result<probe::Samples, String> {
        let b = manifest.splits.get(&split).ok_or_else(|| format!("dataset has no {split} split"))?;
        let picks = dataset::split_picks(&ds, b).map_err(|e| e.to_string())?;
        ds.samples(&picks, &kinds.0).map_err(|e| e.to_string())
    };
    let (train, val, test) = (samples(Split::Train)?, samples(Split::Val)?, samples(Split::Test)?);
    let config = ProbeConfig { input_size, ..probe_config.clone() };
    let (report, probes) = probe::train_seeds(&train, &val, &test, &config, seeds);
    std::fs::create_dir_all(output).map_err(|e| format!("{}: {e}", output.display()))?;
    let mut checkpoints = Vec::new();
    for (s, p) in report.seeds.iter().zip(&probes) {
        checkpoints.push(match p {
            Some(p) => {
                let name = format!("probe-seed{}.hpck", s.seed);
                checkpoint::save(p, &output.join(&name)).map_err(|e| e.to_string())?;
                Some(name)
            }
            None => None,
        });
    }
    let out = TrainOutput {
        kinds: kinds.clone(),
        sizes: eval::SplitSizes { train: train.len(), val: val.len(), test: test.len() },
        report,
        checkpoints,
    };
    let json = serde_json::to_string_pretty(&out).expect("report serializes");
    std::fs::write(output.join(REPORT_FILE), json + "\n").map_err(|e| e.to_string())?;
    log::info!(
        "{}: mean accuracy {:.2}% ± {:.2} over {} seeds",
        kinds,
        100.0 * out.report.mean_accuracy,
        100.0 * out.report.std_accuracy,
        out.report.completed
    );
    Ok(out)
}

/// Runs one experiment spec; relative source paths are taken from the spec's
/// directory.
pub fn eval_files(spec_path: &Path, experiment: Experiment, output: &Path) -> Result<Grid, eval::EvalError> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    spec.resolve_paths(spec_path.parent().unwrap_or(Path::new(".")));
    let grid = eval::run(experiment, &spec)?;
    grid.write(output)?;
    Ok(grid)
}

/// Builds chat clients for the networked stages. Only called when such a
/// stage actually runs.
pub trait ClientFactory {
    fn client(&self, endpoint: &EndpointConfig) -> Result<Box<dyn ChatClient>, String>;
}

/// Replay transcript when configured, otherwise HTTP; optionally recording.
pub struct DefaultClients;

impl ClientFactory for DefaultClients {
    fn client(&self, e: &EndpointConfig) -> Result<Box<dyn ChatClient>, String> {
        let inner: Box<dyn ChatClient> = match (&e.replay, &e.url) {
            (Some(path), _) => Box::new(ReplayClient::from_file(path).map_err(|err| err.to_string())?),
            (None, Some(url)) => {
                let key = match &e.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?),
                    None => None,
                };
                Box::new(HttpChatClient::new(url, key, Duration::from_secs(e.timeout_secs)))
            }
            (None, None) => return Err("endpoint needs a url or a replay transcript".into()),
        };
        Ok(match &e.record {
            Some(path) => Box::new(RecordingClient::new(inner, path)),
            None => inner,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub cache_hit: bool,
    pub summary: StageSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn tolerance_failures(&self) -> usize {
        self.stages.iter().filter_map(|r| r.summary.tolerance_failures).sum()
    }
}

struct StagePlan {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    settings: serde_json::Value,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    clients: &'a dyn ClientFactory,
    work: PathBuf,
}

impl Runner<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.work).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn plan(&self, stage: Stage) -> StagePlan {
        let c = self.cfg;
        let p = &c.paths;
        let jsonl_out = |o: &Path| vec![c.at(o), diagnostics_path(&c.at(o))];
        let captures: Vec<PathBuf> = p.captures.iter().map(|d| c.at(d)).collect();
        let endpoint = c.endpoint.as_ref().map(|e| serde_json::json!({"model": e.model}));
        match stage {
            Stage::Harvest => StagePlan {
                inputs: vec![c.at(&p.articles)],
                outputs: jsonl_out(&p.candidates),
                settings: serde_json::json!({"cutoff": c.cutoff}),
            },
            Stage::Qagen => StagePlan {
                inputs: vec![c.at(&p.candidates)],
                outputs: jsonl_out(&p.qa),
                settings: serde_json::json!({"endpoint": endpoint}),
            },
            Stage::Prompts => StagePlan {
                inputs: vec![c.at(&p.qa), c.at(&p.candidates)],
                outputs: jsonl_out(&p.prompts),
                settings: serde_json::json!({"seed": c.seed}),
            },
            Stage::Label => StagePlan {
                inputs: std::iter::once(c.at(&p.prompts))
                    .chain(captures.iter().map(|d| d.join(states::RESPONSES_FILE)))
                    .collect(),
                outputs: jsonl_out(&p.labeled),
                settings: serde_json::json!({"endpoint": endpoint}),
            },
            Stage::Assemble => StagePlan {
                inputs: std::iter::once(c.at(&p.labeled)).chain(captures).collect(),
                outputs: vec![c.at(&p.dataset)],
                settings: serde_json::json!({"seed": c.seed, "ratios": c.assemble.ratios}),
            },
            Stage::Train => StagePlan {
                inputs: vec![c.at(&p.dataset)],
                outputs: vec![c.at(&p.train)],
                settings: serde_json::json!({"seed": c.seed, "train": c.train}),
            },
            Stage::Eval => {
                let spec = c.eval.as_ref().map(|e| c.at(&e.spec));
                let mut inputs: Vec<PathBuf> = spec.iter().cloned().collect();
                if let Some(s) = spec.as_ref().and_then(|s| ExperimentSpec::load(s).ok().map(|x| (s.clone(), x))) {
                    let base = s.0.parent().unwrap_or(Path::new(".")).to_path_buf();
                    let mut x = s.1;
                    x.resolve_paths(&base);
                    for src in x.sources.values() {
                        inputs.extend(src.path.to_vec());
                    }
                }
                StagePlan {
                    inputs,
                    outputs: vec![c.at(&p.eval)],
                    settings: serde_json::json!({"experiment": c.eval.as_ref().map(|e| e.experiment)}),
                }
            }
        }
    }

    fn execute(&self, stage: Stage, staged: &[PathBuf]) -> Result<StageSummary, PipelineError> {
        let c = self.cfg;
        let p = &c.paths;
        let fail = |e: String| PipelineError::stage(stage, e);
        let captures: Vec<PathBuf> = p.captures.iter().map(|d| c.at(d)).collect();
        let with_caller = |f: &dyn Fn(&Caller<'_>, &EndpointConfig) -> Result<StageSummary, String>| {
            let e = c.endpoint.as_ref().expect("validated");
            let client = self.clients.client(e).map_err(fail)?;
            let limiter = e.limiter();
            let caller = Caller { client: client.as_ref(), retry: e.retry, limiter: limiter.as_ref() };
            f(&caller, e).map_err(fail)
        };
        match stage {
            Stage::Harvest => harvest_files(&c.at(&p.articles), c.cutoff.expect("validated"), &staged[0]).map_err(fail),
            Stage::Qagen => with_caller(&|caller, e| {
                qagen_files(&c.at(&p.candidates), &staged[0], caller, &QaSettings::new(&e.model), e.parallelism)
            }),
            Stage::Prompts => prompts_files(&c.at(&p.qa), &c.at(&p.candidates), c.seed, &staged[0]).map_err(fail),
            Stage::Label => {
                let responses: Vec<PathBuf> = captures.iter().map(|d| d.join(states::RESPONSES_FILE)).collect();
                with_caller(&|caller, e| {
                    label_files(&responses, &c.at(&p.prompts), &staged[0], caller, &JudgeSettings::new(&e.model), e.parallelism)
                })
            }
            Stage::Assemble => {
                assemble_files(&c.at(&p.labeled), &captures, c.assemble.ratios, c.seed, &staged[0]).map_err(fail)
            }
            Stage::Train => {
                let seeds = probe::seed_list(c.seed, c.train.seeds);
                let out = train_files(&c.at(&p.dataset), &c.train.kinds, &c.train.probe, &seeds, &staged[0]).map_err(fail)?;
                Ok(StageSummary {
                    records: out.sizes.train + out.sizes.val + out.sizes.test,
                    diagnostics: out.report.seeds.len() - out.report.completed,
                    tolerance_failures: None,
                })
            }
            Stage::Eval => {
                let e = c.eval.as_ref().expect("validated");
                let grid = eval_files(&c.at(&e.spec), e.experiment, &staged[0]).map_err(|e| fail(e.to_string()))?;
                let unavailable = grid.cells.iter().filter(|c| !c.available).count();
                Ok(StageSummary {
                    records: grid.cells.len(),
                    diagnostics: unavailable,
                    tolerance_failures: Some(grid.failed_checks().len()),
                })
            }
        }
    }

    fn run_stage(&self, stage: Stage, previous: Option<&StageRecord>) -> Result<StageRecord, PipelineError> {
        let plan = self.plan(stage);
        let mut inputs = BTreeMap::new();
        for i in &plan.inputs {
            if !i.exists() {
                return Err(PipelineError::MissingInput { stage, path: i.display().to_string() });
            }
            let d = digest_path(i).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", i.display())))?;
            inputs.insert(self.rel(i), d);
        }
        let fingerprint = sha256_hex(
            serde_json::json!({"tool": TOOL_VERSION, "stage": stage, "settings": plan.settings, "inputs": inputs})
                .to_string()
                .as_bytes(),
        );
        if let Some(prev) = previous.filter(|p| p.fingerprint == fingerprint) {
            let intact = plan.outputs.iter().all(|o| {
                o.exists() && prev.outputs.get(&self.rel(o)).is_some_and(|d| digest_path(o).is_ok_and(|x| x == *d))
            });
            if intact {
                log::info!("{stage}: inputs unchanged, reusing outputs");
                return Ok(StageRecord { cache_hit: true, ..prev.clone() });
            }
        }

        let staging = self.work.join(".partial").join(stage.as_str());
        let quarantine = self.work.join("quarantine").join(stage.as_str());
        let io = |e: std::io::Error, p: &Path| PipelineError::stage(stage, format!("{}: {e}", p.display()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(|e| io(e, &staging))?;
        }
        std::fs::create_dir_all(&staging).map_err(|e| io(e, &staging))?;
        let staged: Vec<PathBuf> = plan
            .outputs
            .iter()
            .map(|o| staging.join(o.file_name().expect("outputs are named paths")))
            .collect();
        log::info!("{stage}: running");
        let summary = match self.execute(stage, &staged) {
            Ok(s) => s,
            Err(e) => {
                if quarantine.exists() {
                    std::fs::remove_dir_all(&quarantine).map_err(|e| io(e, &quarantine))?;
                }
                std::fs::create_dir_all(quarantine.parent().expect("has parent")).map_err(|e| io(e, &quarantine))?;
                std::fs::rename(&staging, &quarantine).map_err(|e| io(e, &quarantine))?;
                log::error!("{stage}: partial outputs moved to {}", quarantine.display());
                return Err(e);
            }
        };
        let mut outputs = BTreeMap::new();
        for (s, o) in staged.iter().zip(&plan.outputs) {
            if !s.exists() {
                return Err(PipelineError::stage(stage, format!("did not produce {}", o.display())));
            }
            if let Some(parent) = o.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io(e, parent))?;
            }
            if o.is_dir() {
                std::fs::remove_dir_all(o).map_err(|e| io(e, o))?;
            } else if o.exists() {
                std::fs::remove_file(o).map_err(|e| io(e, o))?;
            }
            move_path(s, o).map_err(|e| io(e, o))?;
            outputs.insert(self.rel(o), digest_path(o).map_err(|e| io(e, o))?);
        }
        let _ = std::fs::remove_dir_all(&staging);
        Ok(StageRecord { stage, fingerprint, inputs, outputs, cache_hit: false, summary })
    }
}

fn move_path(from: &Path, to: &Path) -> std::io::Result<()> {
    if std::fs::rename(from, to).is_ok() {
        return Ok(());
    }
    if from.is_dir() {
        let mut files = Vec::new();
        collect_files(from, from, &mut files)?;
        for (rel, p) in files {
            let dest = to.join(rel);
            std::fs::create_dir_all(dest.parent().expect("joined path"))?;
            std::fs::copy(&p, &dest)?;
        }
        std::fs::remove_dir_all(from)
    } else {
        std::fs::copy(from, to)?;
        std::fs::remove_file(from)
    }
}

/// Runs `stages` (sorted into pipeline order) and writes the run manifest.
/// Records of stages not run this time are carried over from the previous
/// manifest.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], clients: &dyn ClientFactory) -> Result<RunManifest, PipelineError> {
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    cfg.validate(&stages)?;
    let work = cfg.work_dir();
    std::fs::create_dir_all(&work).map_err(|e| PipelineError::Config(format!("{}: {e}", work.display())))?;
    let manifest_path = work.join(RUN_MANIFEST);
    let previous: Option<RunManifest> =
        std::fs::read_to_string(&manifest_path).ok().and_then(|t| serde_json::from_str(&t).ok());
    let runner = Runner { cfg, clients, work: work.clone() };
    let mut records: BTreeMap<Stage, StageRecord> =
        previous.as_ref().map(|m| m.stages.iter().map(|r| (r.stage, r.clone())).collect()).unwrap_or_default();
    let mut result = Ok(());
    for &s in &stages {
        match runner.run_stage(s, previous.as_ref().and_then(|m| m.stage(s))) {
            Ok(r) => {
                records.insert(s, r);
            }
            Err(e) => {
                records.remove(&s);
                result = Err(e);
                break;
            }
        }
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_sha256: cfg.sha256(),
        stages: records.into_values().collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n")
        .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?;
    result.map(|()| manifest)
}
