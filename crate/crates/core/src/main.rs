use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use hallu_probe::chat::Caller;
use hallu_probe::dataset::Ratios;
use hallu_probe::eval::{Experiment, StateSet};
use hallu_probe::labeler::JudgeSettings;
use hallu_probe::pipeline::{self, ClientFactory, DefaultClients, EndpointConfig, PipelineError, RunConfig, Stage};
use hallu_probe::probe::{self, ProbeConfig};
use hallu_probe::qa::QaSettings;

#[derive(Parser)]
#[command(name = "hallu-probe", version, about = "Recency-controlled RAG hallucination datasets and internal-state probes")]
struct Cli {
    /// Run configuration (TOML); supplies defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for prompt drawing, splitting and probe initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keep recent articles and extract candidate sentences.
    Harvest {
        #[arg(long)]
        input: PathBuf,
        /// Articles created on or before this date are dropped.
        #[arg(long)]
        cutoff: Option<NaiveDate>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a question and answer quote for each candidate sentence.
    Qagen {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        endpoint: EndpointArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build the answerable and unanswerable prompt for each question.
    Prompts {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Judge every response sentence and map the verdicts to labels.
    Label {
        /// One or more `responses.jsonl` files.
        #[arg(long, num_args = 1.., required = true)]
        responses: Vec<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        endpoint: EndpointArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Join labels with captured states, split by question and balance.
    Assemble {
        #[arg(long)]
        labeled: PathBuf,
        /// One or more capture directories.
        #[arg(long, num_args = 1.., required = true)]
        states: Vec<PathBuf>,
        #[arg(long)]
        ratios: Option<Ratios>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one probe per seed on an assembled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// State kinds to concatenate, e.g. `cev_middle,iav_last`.
        #[arg(long, value_parser = parse_state_set)]
        states: Option<StateSet>,
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute a result grid from an experiment spec.
    Eval {
        #[arg(value_enum)]
        experiment: ExperimentArg,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the configured stages in order.
    Run {
        /// Comma-separated subset of stages; defaults to the config's toggles.
        #[arg(long, value_parser = pipeline::parse_stages)]
        stages: Option<std::vec::Vec<Stage>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Table,
    Crosstest,
    Ablate,
    Rates,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Table => Experiment::Table,
            ExperimentArg::Crosstest => Experiment::CrossTest,
            ExperimentArg::Ablate => Experiment::Ablate,
            ExperimentArg::Rates => Experiment::Rates,
        }
    }
}

#[derive(Args)]
struct EndpointArgs {
    /// Chat-completions URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Serve responses from a recorded transcript instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Append every exchange to a transcript file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Maximum requests per second.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Z-score inputs with training-split statistics.
    #[arg(long)]
    standardize: bool,
}

fn parse_state_set(s: &str) -> Result<StateSet, String> {
    hallu_probe::states::parse_kinds(s).map(StateSet)
}

enum Failure {
    Config(String),
    Stage(String),
    Tolerance(usize),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Stage(e.to_string()),
        }
    }
}

fn stage_err(stage: &str) -> impl Fn(String) -> Failure + '_ {
    move |m| Failure::Stage(format!("{stage}: {m}"))
}

fn endpoint_config(args: &EndpointArgs, base: Option<&EndpointConfig>, default_model: &str) -> Result<EndpointConfig, Failure> {
    let mut e = base.cloned().unwrap_or_else(|| EndpointConfig {
        url: None,
        model: default_model.to_string(),
        api_key_env: None,
        timeout_secs: 120,
        parallelism: 4,
        rate_capacity: None,
        rate_per_second: None,
        retry: Default::default(),
        replay: None,
        record: None,
    });
    if let Some(u) = &args.endpoint {
        e.url = Some(u.clone());
    }
    if let Some(m) = &args.model {
        e.model = m.clone();
    }
    if let Some(r) = &args.replay {
        e.replay = Some(r.clone());
    }
    if let Some(r) = &args.record {
        e.record = Some(r.clone());
    }
    if let Some(k) = &args.api_key_env {
        e.api_key_env = Some(k.clone());
    }
    if let Some(p) = args.parallelism {
        e.parallelism = p;
    }
    if let Some(r) = args.rate {
        e.rate_per_second = Some(r);
    }
    if e.url.is_none() && e.replay.is_none() {
        return Err(Failure::Config("an --endpoint url or a --replay transcript is required".into()));
    }
    if e.parallelism == 0 {
        return Err(Failure::Config("--parallelism must be at least 1".into()));
    }
    Ok(e)
}

fn with_caller<T>(e: &EndpointConfig, f: impl FnOnce(&Caller<'_>) -> T) -> Result<T, Failure> {
    let client = DefaultClients.client(e).map_err(Failure::Config)?;
    let limiter = e.rate_per_second.map(|r| hallu_probe::chat::RateLimiter::new(e.rate_capacity.unwrap_or(1), r));
    Ok(f(&Caller { client: client.as_ref(), retry: e.retry, limiter: limiter.as_ref() }))
}

fn report(stage: &str, s: &pipeline::StageSummary, output: &Path) {
    log::info!("{stage}: wrote {} records to {} ({} diagnostics)", s.records, output.display(), s.diagnostics);
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let endpoint = config.as_ref().and_then(|c| c.endpoint.as_ref());
    match cli.command {
        Command::Harvest { input, cutoff, output } => {
            let cutoff = cutoff
                .or(config.as_ref().and_then(|c| c.cutoff))
                .ok_or_else(|| Failure::Config("--cutoff is required".into()))?;
            let s = pipeline::harvest_files(&input, cutoff, &output).map_err(stage_err("harvest"))?;
            report("harvest", &s, &output);
        }
        Command::Qagen { input, endpoint: args, output } => {
            let e = endpoint_config(&args, endpoint, hallu_probe::qa::DEFAULT_MODEL)?;
            let s = with_caller(&e, |c| pipeline::qagen_files(&input, &output, c, &QaSettings::new(&e.model), e.parallelism))?
                .map_err(stage_err("qagen"))?;
            report("qagen", &s, &output);
        }
        Command::Prompts { qa, candidates, output } => {
            let s = pipeline::prompts_files(&qa, &candidates, seed, &output).map_err(stage_err("prompts"))?;
            report("prompts", &s, &output);
        }
        Command::Label { responses, prompts, endpoint: args, output } => {
            let e = endpoint_config(&args, endpoint, hallu_probe::labeler::DEFAULT_MODEL)?;
            let s = with_caller(&e, |c| {
                pipeline::label_files(&responses, &prompts, &output, c, &JudgeSettings::new(&e.model), e.parallelism)
            })?
            .map_err(stage_err("label"))?;
            report("label", &s, &output);
        }
        Command::Assemble { labeled, states, ratios, output } => {
            let ratios = ratios.or(config.as_ref().map(|c| c.assemble.ratios)).unwrap_or_default();
            let s = pipeline::assemble_files(&labeled, &states, ratios, seed, &output).map_err(stage_err("assemble"))?;
            report("assemble", &s, &output);
        }
        Command::Train { dataset, states, seeds, probe: p, output } => {
            let base = config.as_ref().map(|c| c.train.clone()).unwrap_or_default();
            let kinds = states.unwrap_or(base.kinds);
            let mut cfg = ProbeConfig { ..base.probe };
            if let Some(v) = p.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = p.max_epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = p.patience {
                cfg.patience = v;
            }
            cfg.standardize |= p.standardize;
            let count = seeds.unwrap_or(base.seeds);
            if count == 0 {
                return Err(Failure::Config("--seeds must be at least 1".into()));
            }
            let out = pipeline::train_files(&dataset, &kinds, &cfg, &probe::seed_list(seed, count), &output)
                .map_err(stage_err("train"))?;
            println!(
                "{}: {:.2} ± {:.2} ({} of {} seeds)",
                kinds,
                100.0 * out.report.mean_accuracy,
                100.0 * out.report.std_accuracy,
                out.report.completed,
                out.report.seeds.len()
            );
        }
        Command::Eval { experiment, spec, output } => {
            let grid = pipeline::eval_files(&spec, experiment.into(), &output).map_err(|e| match e {
                hallu_probe::eval::EvalError::Spec(_) => Failure::Config(e.to_string()),
                _ => Failure::Stage(e.to_string()),
            })?;
            print!("{}", grid.render());
            let failed = grid.failed_checks().len();
            if failed > 0 {
                return Err(Failure::Tolerance(failed));
            }
        }
        Command::Run { stages } => {
            let mut cfg = config.ok_or_else(|| Failure::Config("run needs --config".into()))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let stages = stages.unwrap_or_else(|| cfg.stages.enabled());
            let manifest = pipeline::run_pipeline(&cfg, &stages, &DefaultClients)?;
            for r in &manifest.stages {
                if stages.contains(&r.stage) {
                    println!(
                        "{:<9} {} records, {} diagnostics{}",
                        r.stage,
                        r.summary.records,
                        r.summary.diagnostics,
                        if r.cache_hit { " (cached)" } else { "" }
                    );
                }
            }
            let failed: usize =
                manifest.stages.iter().filter(|r| stages.contains(&r.stage)).filter_map(|r| r.summary.tolerance_failures).sum();
            if failed > 0 {
                return Err(Failure::Tolerance(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("hallu-probe: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("hallu-probe: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Tolerance(n)) => {
            eprintln!("hallu-probe: {n} cell(s) outside the reproduction tolerance");
            ExitCode::from(4)
        }
    }
}
