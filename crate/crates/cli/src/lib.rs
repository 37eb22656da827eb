//! Command-line front end for `rks_core`.
//!
//! Every subcommand is exposed as a `cmd_*` function so it can be driven in
//! process; [`run`] adds argument parsing, config files, thread control and
//! exit codes on top.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use rks_core::data::{load_dataset, load_dataset_with_classes, median_pairwise_distance, split_heldout, DEFAULT_MEDIAN_SUBSAMPLE};
use rks_core::metrics::MetricsRecord;
use rks_core::model::{init_model, Bottleneck, Model, ModelConfig};
use rks_core::oracle::{approximation_errors, ApproxError, DEFAULT_ORACLE_CAP};
use rks_core::rff::{sample_projection_bank, KernelFamily, KernelSpec};
use rks_core::selection::{export_trace, parse_trace, select_checkpoint, SelectionCriterion};
use rks_core::trainer::{evaluate_checkpoint, train, DirCheckpoints, TrainConfig, TrainError};
use serde::Serialize;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "RKS_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(rks_core::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Numerical(_) => EXIT_NUMERIC,
        }
    }
}

impl From<rks_core::Error> for CliError {
    fn from(e: rks_core::Error) -> Self {
        match e {
            rks_core::Error::NonFinite(what) => Self::Numerical(format!("non-finite {what}")),
            rks_core::Error::InvalidParameter(m) => Self::Usage(m),
            other => Self::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `auto` or a positive bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaArg {
    Auto,
    Value(f64),
}

impl FromStr for SigmaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Self::Value(v)),
            _ => Err(format!("expected `auto` or a positive number, got {s:?}")),
        }
    }
}

impl fmt::Display for SigmaArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rks", version, about = "Random-feature acoustic model toolkit")]
pub struct Cli {
    /// Worker threads; falls back to RKS_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and record a checkpoint trace.
    Train(TrainArgs),
    /// Pick a checkpoint from a run directory.
    Select(SelectArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Measure kernel approximation error against the exact kernel.
    ApproxCheck(ApproxArgs),
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// key=value file supplying any flag; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of classes, for CSV data whose labels do not reach C.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value = "rbf")]
    pub kernel: KernelFamily,
    #[arg(long, default_value = "auto")]
    pub sigma: SigmaArg,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_mult: f64,
    #[arg(long)]
    pub features: usize,
    #[arg(long, default_value = "none")]
    pub bottleneck: Bottleneck,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.5)]
    pub anneal: f64,
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub heldout_frac: f64,
    /// Precompute all training features up front.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub cache_features: bool,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct SelectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_parser = ["ppx", "erp"])]
    pub criterion: String,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct ApproxArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "rbf")]
    pub kernel: KernelFamily,
    #[arg(long, default_value = "auto")]
    pub sigma: SigmaArg,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_mult: f64,
    /// Comma-separated feature counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub features: Vec<usize>,
    #[arg(long, default_value_t = 1_000)]
    pub pairs: usize,
    /// Independent banks per feature count; squared errors are pooled.
    #[arg(long, default_value_t = 1)]
    pub banks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    pub cap: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub epoch: usize,
    pub checkpoint: String,
    pub perplexity: f64,
    pub entropy: f64,
    pub erp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsJson {
    pub perplexity: f64,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub erp: f64,
    pub num_frames: usize,
}

impl From<MetricsRecord> for MetricsJson {
    fn from(m: MetricsRecord) -> Self {
        Self {
            perplexity: m.perplexity,
            accuracy: m.accuracy,
            mean_entropy: m.mean_entropy,
            erp: m.erp,
            num_frames: m.num_frames,
        }
    }
}

fn resolve_sigma(
    sigma: SigmaArg,
    mult: f64,
    data: &rks_core::data::FrameDataset,
    seed: u64,
) -> CliResult<f64> {
    if !(mult > 0.0 && mult.is_finite()) {
        return Err(CliError::Usage(format!("--sigma-mult must be positive, got {mult}")));
    }
    Ok(match sigma {
        SigmaArg::Value(v) => v,
        SigmaArg::Auto => {
            let median = median_pairwise_distance(data, DEFAULT_MEDIAN_SUBSAMPLE, seed)?;
            if median <= 0.0 {
                return Err(CliError::Data(rks_core::Error::InvalidParameter(
                    "median pairwise distance is zero; pass --sigma explicitly".into(),
                )));
            }
            mult * median
        }
    })
}

fn resolved_config(args: &TrainArgs, sigma: f64) -> String {
    let mut lines = vec![
        format!("# sigma requested as {} with multiplier {}", args.sigma, args.sigma_mult),
        format!("data={}", args.data.display()),
    ];
    if let Some(c) = args.classes {
        lines.push(format!("classes={c}"));
    }
    lines.extend([
        format!("kernel={}", args.kernel.name()),
        format!("sigma={sigma}"),
        "sigma-mult=1".to_string(),
        format!("features={}", args.features),
        format!("bottleneck={}", args.bottleneck),
        format!("epochs={}", args.epochs),
        format!("seed={}", args.seed),
        format!("out={}", args.out.display()),
        format!("lr={}", args.lr),
        format!("momentum={}", args.momentum),
        format!("anneal={}", args.anneal),
        format!("batch={}", args.batch),
        format!("l2={}", args.l2),
        format!("eval-every={}", args.eval_every),
        format!("heldout-frac={}", args.heldout_frac),
        format!("cache-features={}", args.cache_features),
    ]);
    lines.join("\n") + "\n"
}

/// Train end to end and populate `args.out` with `config.resolved`,
/// `bank.rffb`, `trace.csv` and one checkpoint per evaluated epoch.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> CliResult<PathBuf> {
    let data = load_dataset_with_classes(&args.data, args.classes)?;
    let sigma = resolve_sigma(args.sigma, args.sigma_mult, &data, args.seed)?;
    writeln!(log, "sigma={sigma:?}")?;
    let spec = KernelSpec::new(args.kernel, sigma)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.resolved"), resolved_config(args, sigma))?;

    let (train_set, heldout) = split_heldout(&data, args.heldout_frac, args.seed)?;
    let bank = sample_projection_bank(spec, data.dim(), args.features, args.seed)?;
    bank.save(args.out.join("bank.rffb"))?;
    let model = init_model(
        ModelConfig::new(data.num_classes(), args.features, args.bottleneck),
        args.seed,
    )?
    .with_bank(&bank)?;
    let config = TrainConfig {
        minibatch_size: args.batch,
        learning_rate: args.lr,
        momentum: args.momentum,
        anneal_factor: args.anneal,
        max_epochs: args.epochs,
        l2: args.l2,
        seed: args.seed,
        eval_every: args.eval_every,
        cache_features: args.cache_features,
        ..TrainConfig::default()
    };
    let mut sink = DirCheckpoints::new(&args.out)?;
    let trace_path = args.out.join("trace.csv");
    match train(&bank, model, &train_set, &heldout, &config, &mut sink) {
        Ok((_, trace)) => {
            export_trace(&trace, &trace_path)?;
            writeln!(log, "trained {} epochs; trace at {}", args.epochs, trace_path.display())?;
            Ok(args.out.clone())
        }
        Err(TrainError::Diverged { epoch, partial }) => {
            export_trace(&partial, &trace_path)?;
            Err(CliError::Numerical(format!(
                "training diverged in epoch {epoch}; partial trace at {}",
                trace_path.display()
            )))
        }
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}

pub fn cmd_select(args: &SelectArgs) -> CliResult<Selection> {
    let criterion: SelectionCriterion = args.criterion.parse()?;
    let trace = parse_trace(args.run.join("trace.csv")).map_err(CliError::Data)?;
    let entry = select_checkpoint(&trace, criterion).map_err(|e| match e {
        rks_core::Error::EmptyDataset => CliError::Data(rks_core::Error::InvalidParameter("trace has no entries".into())),
        other => other.into(),
    })?;
    Ok(Selection {
        epoch: entry.epoch,
        checkpoint: entry.checkpoint.clone(),
        perplexity: entry.metrics.perplexity,
        entropy: entry.metrics.mean_entropy,
        erp: entry.metrics.erp,
    })
}

fn load_with_bank(path: &Path) -> CliResult<(Model, rks_core::rff::ProjectionBank)> {
    let model = Model::load(path).map_err(CliError::Data)?;
    let bank = model
        .bank_ref()
        .ok_or_else(|| {
            CliError::Data(rks_core::Error::InvalidParameter(format!(
                "{} carries no projection bank",
                path.display()
            )))
        })?
        .reconstruct()
        .map_err(CliError::Data)?;
    Ok((model, bank))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<MetricsJson> {
    let (model, bank) = load_with_bank(&args.checkpoint)?;
    let data = load_dataset_with_classes(&args.data, Some(model.num_classes())).map_err(CliError::Data)?;
    let record = evaluate_checkpoint(&bank, &model, &data)?;
    Ok(record.into())
}

pub fn cmd_approx_check(args: &ApproxArgs) -> CliResult<Vec<ApproxError>> {
    let data = load_dataset(&args.data).map_err(CliError::Data)?;
    if data.len() > args.cap {
        return Err(CliError::Data(rks_core::Error::CapExceeded {
            n: data.len(),
            cap: args.cap,
        }));
    }
    let sigma = resolve_sigma(args.sigma, args.sigma_mult, &data, args.seed)?;
    let spec = KernelSpec::new(args.kernel, sigma)?;
    let rows = approximation_errors(
        &spec,
        data.features(),
        &args.features,
        args.pairs,
        args.banks,
        args.seed,
        args.cap,
    )?;
    if let Some(path) = &args.out {
        fs::write(path, approx_report(&rows))?;
    }
    Ok(rows)
}

pub fn approx_report(rows: &[ApproxError]) -> String {
    let mut out = String::from("D,rms_error,max_error\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.num_features, r.rms_error, r.max_error));
    }
    out
}

/// Insert `key=value` lines from any `--config FILE` right after the
/// subcommand name, so later command-line flags override them.
pub fn expand_config(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = Some(
                strs.get(i + 1)
                    .cloned()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?,
            );
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(path) = config else { return Ok(argv) };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(rks_core::Error::Io(std::io::Error::new(e.kind(), format!("{path}: {e}")))))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key == "config" || key == "threads" {
            return Err(CliError::Usage(format!("{path}:{}: `{key}` cannot be set from a config file", n + 1)));
        }
        extra.push(OsString::from(format!("--{key}={}", value.trim())));
    }
    // Program name, then the first non-flag token is the subcommand.
    let sub = strs
        .iter()
        .enumerate()
        .skip(1)
        .find(|(i, a)| !a.starts_with('-') && strs[i - 1] != "--threads")
        .map(|(i, _)| i)
        .unwrap_or(strs.len().saturating_sub(1));
    let mut out = argv;
    let tail = out.split_off(sub + 1);
    out.extend(extra);
    out.extend(tail);
    Ok(out)
}

fn thread_count(cli: &Cli) -> CliResult<Option<usize>> {
    if let Some(n) = cli.threads {
        return if n == 0 {
            Err(CliError::Usage("--threads must be positive".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => {
            cmd_train(a, err)?;
        }
        Command::Select(a) => {
            let s = cmd_select(a)?;
            writeln!(out, "{}", serde_json::to_string(&s).expect("selection serializes"))?;
        }
        Command::Eval(a) => {
            let m = cmd_eval(a)?;
            writeln!(out, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        Command::ApproxCheck(a) => {
            let rows = cmd_approx_check(a)?;
            if a.out.is_none() {
                out.write_all(approx_report(&rows).as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parse `argv` and run one command. Returns the process exit code.
pub fn run(argv: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    let sub = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).find(|a| !a.starts_with('-'));
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let rendered = e.render().to_string();
            let _ = write!(err, "{rendered}");
            if !e.use_stderr() {
                return EXIT_OK;
            }
            if !rendered.contains("Usage:") {
                let mut cmd = Cli::command();
                let usage = match sub.and_then(|name| cmd.find_subcommand_mut(&name).cloned()) {
                    Some(mut sc) => sc.render_usage(),
                    None => cmd.render_usage(),
                };
                let _ = writeln!(err, "\n{usage}");
            }
            return EXIT_USAGE;
        }
    };
    // Output is buffered so the command can run inside a sized thread pool.
    let (mut out_buf, mut err_buf) = (Vec::new(), Vec::new());
    let result = thread_count(&cli).and_then(|threads| match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| dispatch(&cli, &mut out_buf, &mut err_buf)),
        None => dispatch(&cli, &mut out_buf, &mut err_buf),
    });
    let _ = out.write_all(&out_buf);
    let _ = err.write_all(&err_buf);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
