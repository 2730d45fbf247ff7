//! Command-line front end.
//!
//! Run settings are layered: command-line flags win over the TOML config
//! file, which wins over `IAP_*` environment variables, which win over
//! built-in defaults. The API credential is only ever read from the
//! environment (`OPENAI_API_KEY` unless `api_key_env` names another
//! variable).
//!
//! `run` writes a fixed layout under the output directory:
//!
//! ```text
//! predictions/<strategy>.jsonl   one prediction per dialogue, sorted by id
//! metrics/<strategy>.json        confusion matrix and metrics (labeled data)
//! logs/<strategy>.jsonl          run log with timings
//! compare.md, compare.json       comparison against the baseline strategy
//! fnfp.json                      FN/FP chart data
//! run.json                       run manifest
//! sessions/                      annotation sessions
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::anneval::{self, Session, SessionMode};
use crate::corpus::{
    self, Corpus, Delimiter, FewShotBank, Label, LoadOptions, Provenance, SchemaMap,
};
use crate::gateway::{
    mock_backend, Backend, CacheStore, Gateway, MockScript, OpenAiBackend, DEFAULT_MODEL,
};
use crate::metrics::{self, Averaging, MetricsReport, StrategyReport};
use crate::pipeline::{
    IntentPair, Pipeline, PipelineConfig, PipelineError, Prediction, RunLog, Strategy, VerdictMode,
};
use crate::prompting::TemplateSet;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";

#[derive(Debug, Parser)]
#[command(name = "iap", version, about = "Manipulation detection prompting harness")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the dataset and run detection strategies.
    Run(Box<RunArgs>),
    /// Compare metrics files against a baseline strategy.
    Compare(CompareArgs),
    /// Interactive annotation session.
    #[command(after_help = anneval::KEYBINDINGS)]
    Annotate(AnnotateArgs),
    /// Percent agreement between two annotation session files.
    Agreement(AgreementArgs),
    /// Share of generated intents judged accurate.
    Accuracy(AccuracyArgs),
    /// Write FN/FP chart data from metrics files.
    Chart(ChartArgs),
}

fn parse_verdict_override(s: &str) -> Result<(Strategy, VerdictMode), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected STRATEGY=MODE, got {s:?}"))?;
    Ok((k.parse()?, v.parse()?))
}

#[derive(Debug, Clone, Default, Args)]
pub struct SchemaArgs {
    /// Id column name.
    #[arg(long)]
    pub id_column: Option<String>,
    /// Dialogue text column name.
    #[arg(long)]
    pub text_column: Option<String>,
    /// Gold label column name ("none" for unlabeled data).
    #[arg(long)]
    pub label_column: Option<String>,
    /// Field delimiter; inferred from the file extension when omitted.
    #[arg(long, value_parser = parse_delimiter)]
    pub delimiter: Option<Delimiter>,
}

fn parse_delimiter(s: &str) -> Result<Delimiter, String> {
    match s {
        "comma" | "," => Ok(Delimiter::Comma),
        "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
        other => Err(format!("unknown delimiter {other:?} (comma or tab)")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strategy to run; repeatable. Defaults to all four.
    #[arg(long = "strategy", value_parser = |s: &str| s.parse::<Strategy>())]
    pub strategies: Vec<Strategy>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub sample_frac: Option<f64>,
    /// Keep class proportions when sampling.
    #[arg(long)]
    pub stratified: bool,
    /// Sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Few-shot exemplar seed.
    #[arg(long)]
    pub fewshot_seed: Option<u64>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// OpenAI-compatible base URL or chat/completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Answer from a mock script instead of a remote model.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Baseline strategy for compare.md.
    #[arg(long, value_parser = |s: &str| s.parse::<Strategy>())]
    pub baseline: Option<Strategy>,
    /// Largest tolerated fraction of errored dialogues.
    #[arg(long)]
    pub error_threshold: Option<f64>,
    /// Verdict parsing override, e.g. `iap=lenient`; repeatable.
    #[arg(long = "verdict-mode", value_parser = parse_verdict_override)]
    pub verdict_modes: Vec<(Strategy, VerdictMode)>,
    /// Precision/recall averaging: positive or weighted.
    #[arg(long, value_parser = |s: &str| match s {
        "positive" => Ok(Averaging::Positive),
        "weighted" => Ok(Averaging::Weighted),
        o => Err(format!("unknown averaging {o:?}")),
    })]
    pub averaging: Option<Averaging>,
    /// Directory of template files overriding the built-in prompts.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

/// Config file / environment layer. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Option<SchemaMap>,
    pub delimiter: Option<Delimiter>,
    pub sample_frac: Option<f64>,
    pub stratified: Option<bool>,
    pub seed: Option<u64>,
    pub fewshot_seed: Option<u64>,
    pub strategies: Option<Vec<Strategy>>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub mock_script: Option<PathBuf>,
    pub baseline: Option<Strategy>,
    pub error_threshold: Option<f64>,
    pub verdict_modes: Option<BTreeMap<Strategy, VerdictMode>>,
    pub averaging: Option<Averaging>,
    pub templates: Option<PathBuf>,
}

impl PartialConfig {
    /// Fills every unset field from `lower`.
    fn or(self, lower: PartialConfig) -> PartialConfig {
        PartialConfig {
            dataset: self.dataset.or(lower.dataset),
            schema: self.schema.or(lower.schema),
            delimiter: self.delimiter.or(lower.delimiter),
            sample_frac: self.sample_frac.or(lower.sample_frac),
            stratified: self.stratified.or(lower.stratified),
            seed: self.seed.or(lower.seed),
            fewshot_seed: self.fewshot_seed.or(lower.fewshot_seed),
            strategies: self.strategies.or(lower.strategies),
            model: self.model.or(lower.model),
            temperature: self.temperature.or(lower.temperature),
            max_tokens: self.max_tokens.or(lower.max_tokens),
            endpoint: self.endpoint.or(lower.endpoint),
            api_key_env: self.api_key_env.or(lower.api_key_env),
            cache: self.cache.or(lower.cache),
            out: self.out.or(lower.out),
            concurrency: self.concurrency.or(lower.concurrency),
            mock_script: self.mock_script.or(lower.mock_script),
            baseline: self.baseline.or(lower.baseline),
            error_threshold: self.error_threshold.or(lower.error_threshold),
            verdict_modes: self.verdict_modes.or(lower.verdict_modes),
            averaging: self.averaging.or(lower.averaging),
            templates: self.templates.or(lower.templates),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config file")
    }

    fn from_args(a: &RunArgs) -> Self {
        let schema = (a.schema.id_column.is_some()
            || a.schema.text_column.is_some()
            || a.schema.label_column.is_some())
        .then(|| {
            let d = SchemaMap::default();
            SchemaMap {
                id: a.schema.id_column.clone().unwrap_or(d.id),
                dialogue: a.schema.text_column.clone().unwrap_or(d.dialogue),
                label: match a.schema.label_column.as_deref() {
                    Some("none") => None,
                    Some(l) => Some(l.to_string()),
                    None => d.label,
                },
                label_values: BTreeMap::new(),
            }
        });
        PartialConfig {
            dataset: a.dataset.clone(),
            schema,
            delimiter: a.schema.delimiter,
            sample_frac: a.sample_frac,
            stratified: a.stratified.then_some(true),
            seed: a.seed,
            fewshot_seed: a.fewshot_seed,
            strategies: (!a.strategies.is_empty()).then(|| a.strategies.clone()),
            model: a.model.clone(),
            temperature: a.temperature,
            max_tokens: a.max_tokens,
            endpoint: a.endpoint.clone(),
            api_key_env: a.api_key_env.clone(),
            cache: a.cache.clone(),
            out: a.out.clone(),
            concurrency: a.concurrency,
            mock_script: a.mock_script.clone(),
            baseline: a.baseline,
            error_threshold: a.error_threshold,
            verdict_modes: (!a.verdict_modes.is_empty())
                .then(|| a.verdict_modes.iter().copied().collect()),
            averaging: a.averaging,
            templates: a.templates.clone(),
        }
    }

    fn from_env(env: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        fn parsed<T: std::str::FromStr>(
            env: &dyn Fn(&str) -> Option<String>,
            key: &str,
        ) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            env(key)
                .map(|v| v.parse::<T>().map_err(|e| anyhow!("{key}={v:?}: {e}")))
                .transpose()
        }
        Ok(PartialConfig {
            dataset: env("IAP_DATASET").map(PathBuf::from),
            sample_frac: parsed(env, "IAP_SAMPLE_FRAC")?,
            seed: parsed(env, "IAP_SEED")?,
            fewshot_seed: parsed(env, "IAP_FEWSHOT_SEED")?,
            model: env("IAP_MODEL"),
            temperature: parsed(env, "IAP_TEMPERATURE")?,
            endpoint: env("IAP_ENDPOINT"),
            api_key_env: env("IAP_API_KEY_ENV"),
            cache: env("IAP_CACHE").map(PathBuf::from),
            out: env("IAP_OUT").map(PathBuf::from),
            concurrency: parsed(env, "IAP_CONCURRENCY")?,
            mock_script: env("IAP_MOCK_SCRIPT").map(PathBuf::from),
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Mock { script: PathBuf },
    Remote { endpoint: String, api_key: String },
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub schema: SchemaMap,
    pub delimiter: Option<Delimiter>,
    pub sample_frac: f64,
    pub stratified: bool,
    pub seed: u64,
    pub fewshot_seed: u64,
    pub strategies: Vec<Strategy>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub backend: BackendConfig,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub concurrency: usize,
    pub baseline: Strategy,
    pub error_threshold: f64,
    pub verdict_modes: BTreeMap<Strategy, VerdictMode>,
    pub averaging: Averaging,
    pub templates: Option<PathBuf>,
}

impl RunConfig {
    /// Resolves flags over the config file over the environment over
    /// defaults, then validates the result.
    pub fn resolve(args: &RunArgs, env: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let file = match &args.config {
            Some(p) => PartialConfig::from_toml(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?,
            None => PartialConfig::default(),
        };
        Self::from_layers(PartialConfig::from_args(args), file, env)
    }

    pub fn from_layers(
        flags: PartialConfig,
        file: PartialConfig,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let c = flags.or(file).or(PartialConfig::from_env(env)?);
        let out = c.out.unwrap_or_else(|| PathBuf::from("out"));
        let backend = match c.mock_script {
            Some(script) => BackendConfig::Mock { script },
            None => {
                let var = c.api_key_env.unwrap_or_else(|| DEFAULT_API_KEY_ENV.into());
                let api_key = env(&var).filter(|k| !k.trim().is_empty()).ok_or_else(|| {
                    anyhow!("no API credential: set {var} or pass --mock-script")
                })?;
                BackendConfig::Remote {
                    endpoint: c.endpoint.unwrap_or_else(|| DEFAULT_ENDPOINT.into()),
                    api_key,
                }
            }
        };
        let mut strategies = c.strategies.unwrap_or_else(|| Strategy::ALL.to_vec());
        strategies.sort();
        strategies.dedup();
        let cfg = RunConfig {
            dataset: c.dataset.ok_or_else(|| anyhow!("no dataset given (--dataset)"))?,
            schema: c.schema.unwrap_or_default(),
            delimiter: c.delimiter,
            sample_frac: c.sample_frac.unwrap_or(0.3),
            stratified: c.stratified.unwrap_or(false),
            seed: c.seed.unwrap_or(42),
            fewshot_seed: c.fewshot_seed.unwrap_or(42),
            strategies,
            model: c.model.unwrap_or_else(|| DEFAULT_MODEL.into()),
            temperature: c.temperature.unwrap_or(0.0),
            max_tokens: c.max_tokens,
            backend,
            cache: c.cache.unwrap_or_else(|| out.join("cache.jsonl")),
            out,
            concurrency: c.concurrency.unwrap_or(4),
            baseline: c.baseline.unwrap_or(Strategy::ZeroShot),
            error_threshold: c.error_threshold.unwrap_or(0.05),
            verdict_modes: c.verdict_modes.unwrap_or_default(),
            averaging: c.averaging.unwrap_or_default(),
            templates: c.templates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_frac > 0.0 && self.sample_frac <= 1.0) {
            bail!("sample fraction {} is outside (0, 1]", self.sample_frac);
        }
        if self.concurrency < 1 {
            bail!("concurrency must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.error_threshold) {
            bail!("error threshold {} is outside [0, 1]", self.error_threshold);
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            bail!("temperature must be >= 0");
        }
        if self.strategies.is_empty() {
            bail!("no strategies selected");
        }
        if !self.dataset.is_file() {
            bail!("dataset {} not found", self.dataset.display());
        }
        if let BackendConfig::Mock { script } = &self.backend {
            if !script.is_file() {
                bail!("mock script {} not found", script.display());
            }
        }
        if let Some(t) = &self.templates {
            if !t.is_dir() {
                bail!("template directory {} not found", t.display());
            }
        }
        Ok(())
    }

    fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            verdict_overrides: self.verdict_modes.iter().map(|(s, m)| (*s, *m)).collect(),
            error_threshold: self.error_threshold,
            concurrency: self.concurrency,
        }
    }
}

/// Builds the backend named by `cfg`. The mock backend is returned
/// separately so callers can inspect its request log.
pub fn build_backend(cfg: &BackendConfig) -> Result<Arc<dyn Backend>> {
    Ok(match cfg {
        BackendConfig::Mock { script } => Arc::new(mock_backend(MockScript::from_path(script)?)?),
        BackendConfig::Remote { endpoint, api_key } => Arc::new(OpenAiBackend::new(
            endpoint,
            api_key.clone(),
            Duration::from_secs(120),
        )),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyStatus {
    pub strategy: Strategy,
    pub status: String,
    pub predictions: usize,
    pub invalid: usize,
    pub errored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub provenance: Provenance,
    pub corpus_size: usize,
    pub subset_size: usize,
    pub model: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot_bank: Option<Vec<String>>,
    pub strategies: Vec<StrategyStatus>,
    /// False when a strategy aborted and later artifacts are missing.
    pub complete: bool,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub reports: Vec<StrategyReport>,
    pub backend_calls: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn load_corpus(
    dataset: &Path,
    schema: &SchemaMap,
    delimiter: Option<Delimiter>,
) -> Result<Corpus> {
    let report = corpus::load_dataset(
        dataset,
        schema,
        &LoadOptions {
            delimiter,
            strict: true,
        },
    )?;
    Ok(report.corpus)
}

/// Loads and samples the corpus, selects the few-shot bank from the
/// unsampled remainder, runs every strategy and writes the artifacts.
pub fn cmd_run(cfg: &RunConfig, backend: Arc<dyn Backend>) -> Result<RunArtifacts> {
    let templates = match &cfg.templates {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::embedded(),
    };
    let full = load_corpus(&cfg.dataset, &cfg.schema, cfg.delimiter)?;
    let subset = if cfg.stratified {
        corpus::sample_subset_stratified(&full, cfg.sample_frac, cfg.seed)?
    } else {
        corpus::sample_subset(&full, cfg.sample_frac, cfg.seed)?
    };
    let bank: Option<FewShotBank> = if cfg.strategies.contains(&Strategy::FewShot) {
        let pool = full.complement(&subset);
        let bank = corpus::select_few_shot(&pool, cfg.fewshot_seed)
            .context("selecting few-shot exemplars from the unsampled remainder")?;
        bank.check_disjoint(&subset)?;
        Some(bank)
    } else {
        None
    };

    let cache = CacheStore::open(&cfg.cache)?;
    let gateway = Arc::new(
        Gateway::new(backend, cache).with_concurrency(cfg.concurrency),
    );
    let pipeline = Pipeline::new(gateway.clone(), templates, cfg.pipeline_config());
    let labeled = subset.dialogues().iter().all(|d| d.gold_label.is_some());
    let gold = metrics::gold_labels(&subset);

    let mut manifest = RunManifest {
        provenance: subset.provenance.clone(),
        corpus_size: full.len(),
        subset_size: subset.len(),
        model: cfg.model.clone(),
        temperature: cfg.temperature,
        few_shot_bank: bank.as_ref().map(|b| b.ids().iter().map(|s| s.to_string()).collect()),
        strategies: Vec::new(),
        complete: false,
    };
    let mut reports = Vec::new();
    let mut failure = None;
    for &strategy in &cfg.strategies {
        let log = RunLog::create(&cfg.out.join("logs").join(format!("{strategy}.jsonl")))?;
        let b = bank.as_ref().filter(|_| strategy == Strategy::FewShot);
        match pipeline.run_strategy(strategy, &subset, b, Some(&log)) {
            Ok(outcome) => {
                write_predictions(
                    &cfg.out.join("predictions").join(format!("{strategy}.jsonl")),
                    &outcome.predictions,
                )?;
                manifest.strategies.push(StrategyStatus {
                    strategy,
                    status: "complete".into(),
                    predictions: outcome.predictions.len(),
                    invalid: outcome.invalid(),
                    errored: outcome.errored(),
                });
                if outcome.invalid() > 0 {
                    tracing::warn!("{strategy}: {} unparseable verdict(s) scored as 0", outcome.invalid());
                }
                if labeled {
                    let report = StrategyReport::from_outcome(&outcome, &gold, cfg.averaging)?;
                    write_json(&cfg.out.join("metrics").join(format!("{strategy}.json")), &report)?;
                    reports.push(report);
                }
            }
            Err(e) => {
                let errored = match &e {
                    PipelineError::ErrorThreshold { errored, .. } => *errored,
                    _ => 0,
                };
                manifest.strategies.push(StrategyStatus {
                    strategy,
                    status: "aborted".into(),
                    predictions: 0,
                    invalid: 0,
                    errored,
                });
                failure = Some(anyhow!(e).context(format!("strategy {strategy} aborted")));
                break;
            }
        }
    }

    if failure.is_none() {
        if !reports.is_empty() {
            let by_strategy: BTreeMap<Strategy, MetricsReport> =
                reports.iter().map(|r| (r.strategy, r.metrics)).collect();
            metrics::emit_fnfp_chart(&by_strategy, &cfg.out.join("fnfp.json"))?;
            if reports.len() >= 2 && by_strategy.contains_key(&cfg.baseline) {
                let pairs: Vec<_> = by_strategy.into_iter().collect();
                let table = metrics::compare(&pairs, cfg.baseline)?;
                write_text(&cfg.out.join("compare.md"), &table.to_markdown())?;
                write_json(&cfg.out.join("compare.json"), &table)?;
            }
        }
        manifest.complete = true;
    }
    write_json(&cfg.out.join("run.json"), &manifest)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunArtifacts {
        manifest,
        reports,
        backend_calls: gateway.backend_calls(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Metrics files, or directories containing them (`metrics/` is searched
    /// inside a run directory).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "zero-shot", value_parser = |s: &str| s.parse::<Strategy>())]
    pub baseline: Strategy,
    /// Also write the table as Markdown and JSON under this stem.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Expands directories into the `*.json` metrics files they hold.
fn metrics_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let dir = if input.join("metrics").is_dir() {
                input.join("metrics")
            } else {
                input.clone()
            };
            let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

pub fn read_reports(inputs: &[PathBuf]) -> Result<Vec<StrategyReport>> {
    metrics_files(inputs)?
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

pub fn cmd_compare(reports: &[StrategyReport], baseline: Strategy) -> Result<metrics::ComparisonTable> {
    let pairs: Vec<_> = reports.iter().map(|r| (r.strategy, r.metrics)).collect();
    Ok(metrics::compare(&pairs, baseline)?)
}

#[derive(Debug, Clone, Args)]
pub struct ChartArgs {
    /// Metrics files or directories.
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_chart(args: &ChartArgs) -> Result<usize> {
    let reports = read_reports(&args.inputs)?;
    if reports.is_empty() {
        bail!("no metrics files found");
    }
    let mut by_strategy = BTreeMap::new();
    for r in reports {
        if by_strategy.insert(r.strategy, r.metrics).is_some() {
            bail!("strategy {} given twice", r.strategy);
        }
    }
    metrics::emit_fnfp_chart(&by_strategy, &args.out)?;
    Ok(by_strategy.len())
}

#[derive(Debug, Clone, Args)]
pub struct AgreementArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    /// Also report Cohen's kappa.
    #[arg(long)]
    pub kappa: bool,
    /// Consensus session; writes merged labels to --merged-out.
    #[arg(long, requires = "merged_out")]
    pub consensus: Option<PathBuf>,
    #[arg(long)]
    pub merged_out: Option<PathBuf>,
}

pub fn cmd_agreement(args: &AgreementArgs, out: &mut dyn Write) -> Result<f64> {
    let a1 = anneval::to_annotations(&anneval::read_session(&args.first)?)?;
    let a2 = anneval::to_annotations(&anneval::read_session(&args.second)?)?;
    let agreement = anneval::percent_agreement(&a1, &a2)?;
    let same = (agreement * a1.len() as f64).round() as usize;
    writeln!(out, "Percent agreement: {:.1}% ({same}/{})", agreement * 100.0, a1.len())?;
    if args.kappa {
        writeln!(out, "Cohen's kappa: {:.3}", anneval::cohen_kappa(&a1, &a2)?)?;
    }
    if let (Some(c), Some(merged_out)) = (&args.consensus, &args.merged_out) {
        let consensus = anneval::to_annotations(&anneval::read_session(c)?)?;
        let merged = anneval::merge_consensus(&a1, &a2, &consensus)?;
        let mut text = String::new();
        for r in &merged {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_text(merged_out, &text)?;
        writeln!(out, "Merged {} labels into {}", merged.len(), merged_out.display())?;
    }
    Ok(agreement)
}

#[derive(Debug, Clone, Args)]
pub struct AccuracyArgs {
    /// Intent-judgment session files.
    #[arg(required = true)]
    pub sessions: Vec<PathBuf>,
}

pub fn cmd_accuracy(args: &AccuracyArgs, out: &mut dyn Write) -> Result<f64> {
    let mut judgments = Vec::new();
    for p in &args.sessions {
        judgments.extend(anneval::to_judgments(&anneval::read_session(p)?)?);
    }
    let acc = anneval::intent_accuracy(&judgments)?;
    writeln!(
        out,
        "Accurate: {:.1}%  Inaccurate: {:.1}%  ({} judgments)",
        acc * 100.0,
        (1.0 - acc) * 100.0,
        judgments.len()
    )?;
    Ok(acc)
}

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub annotator: String,
    /// Session directory.
    #[arg(long, default_value = "out/sessions")]
    pub sessions: PathBuf,
    /// Continue an existing session, skipping answered dialogues.
    #[arg(long)]
    pub resume: bool,
    /// Judge generated intents from an IAP predictions file instead of
    /// labeling manipulators.
    #[arg(long)]
    pub judge_intents: Option<PathBuf>,
    /// Only present dialogues labeled manipulative.
    #[arg(long)]
    pub manipulative_only: bool,
    /// Present at most this many dialogues (first by id).
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn cmd_annotate(
    args: &AnnotateArgs,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<anneval::SessionSummary> {
    let schema = PartialConfig::from_args(&RunArgs {
        schema: args.schema.clone(),
        ..Default::default()
    })
    .schema
    .unwrap_or_default();
    let full = load_corpus(&args.dataset, &schema, args.schema.delimiter)?;
    let intents: Option<HashMap<String, IntentPair>> = match &args.judge_intents {
        Some(p) => Some(
            read_predictions(p)?
                .into_iter()
                .filter_map(|p| p.intents.map(|i| (p.dialogue_id, i)))
                .collect(),
        ),
        None => None,
    };
    let mut selected = full.filter("annotation", |d| {
        (!args.manipulative_only || d.gold_label == Some(Label::Manipulative))
            && intents.as_ref().is_none_or(|m| m.contains_key(&d.id))
    });
    if let Some(limit) = args.limit {
        let mut ds = selected.dialogues().to_vec();
        ds.sort_by(|a, b| a.id.cmp(&b.id));
        ds.truncate(limit);
        selected = Corpus::new(ds, selected.provenance.clone())?;
    }
    let mode = if intents.is_some() {
        SessionMode::IntentJudgment
    } else {
        SessionMode::Manipulator
    };
    let mut session = Session::open(&args.sessions, &args.annotator, mode, args.resume)?;
    let summary = anneval::annotate_session(&selected, intents.as_ref(), &mut session, input, out)?;
    writeln!(
        out,
        "{} answered this session, {} remaining; saved to {}",
        summary.answered,
        summary.remaining,
        session.path().display()
    )?;
    Ok(summary)
}

/// Runs a parsed command line. `env` supplies environment variables.
pub fn execute(
    cli: Cli,
    env: &dyn Fn(&str) -> Option<String>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = RunConfig::resolve(&args, env)?;
            let backend = build_backend(&cfg.backend)?;
            let artifacts = cmd_run(&cfg, backend)?;
            writeln!(
                out,
                "Ran {} strateg{} on {} of {} dialogues ({} backend calls); artifacts in {}",
                artifacts.manifest.strategies.len(),
                if artifacts.manifest.strategies.len() == 1 { "y" } else { "ies" },
                artifacts.manifest.subset_size,
                artifacts.manifest.corpus_size,
                artifacts.backend_calls,
                cfg.out.display()
            )?;
            for s in &artifacts.manifest.strategies {
                writeln!(
                    out,
                    "  {:<10} predictions={} invalid={} errored={}",
                    s.strategy.as_str(),
                    s.predictions,
                    s.invalid,
                    s.errored
                )?;
            }
            if cfg.out.join("compare.md").is_file() && artifacts.reports.len() >= 2 {
                write!(out, "\n{}", std::fs::read_to_string(cfg.out.join("compare.md"))?)?;
            }
        }
        Command::Compare(args) => {
            let reports = read_reports(&args.inputs)?;
            let table = cmd_compare(&reports, args.baseline)?;
            let md = table.to_markdown();
            write!(out, "{md}")?;
            if let Some(stem) = &args.out {
                write_text(&stem.with_extension("md"), &md)?;
                write_json(&stem.with_extension("json"), &table)?;
            }
        }
        Command::Annotate(args) => {
            cmd_annotate(&args, input, out)?;
        }
        Command::Agreement(args) => {
            cmd_agreement(&args, out)?;
        }
        Command::Accuracy(args) => {
            cmd_accuracy(&args, out)?;
        }
        Command::Chart(args) => {
            let n = cmd_chart(&args)?;
            writeln!(out, "Wrote {n} record(s) to {}", args.out.display())?;
        }
    }
    Ok(())
}
