//! Command-line driver.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codesign::fit_iterative;
use crate::config::{GoqInit, TrainConfig};
use crate::dataset::Dataset;
use crate::error::Error;
use crate::exec;
use crate::harness::data::{gen_synthetic, load_profiles_csv, split_dataset, write_profiles_csv};
use crate::harness::experiment::{emit_report, run_experiment, ExperimentConfig, Report};
use crate::harness::model::{read_model_precoder, EncodeRule, Model};
use crate::harness::SyntheticParams;
use crate::precoding::{empirical_loss, fit_linear_precoder, klt_basis_with, Precoder};
use crate::quantization::{fit_goq, fit_lbg, rebind, uniform_scalar_quantizer};
use crate::scheduler::{solve_waterfill, utility, Norm, TaskSpec};

const DEFAULT_ENERGY: f64 = 50.0;
const THREADS_VAR: &str = "GOALCOMP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "goalcomp", version, about = "Goal-oriented compression for L_p-norm power scheduling")]
pub struct Cli {
    /// Print one machine-readable JSON object on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON file with defaults for the flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Water-fill one profile.
    Solve(SolveArgs),
    /// Train a compression stage and write it as JSON.
    Fit(FitArgs),
    /// Score a model, or run an experiment config.
    Eval(EvalArgs),
    /// Generate a synthetic profile CSV.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// Norm order: a positive integer or "inf" (default inf).
    #[arg(long)]
    pub p: Option<Norm>,
    /// Controllable energy budget.
    #[arg(long = "e", visible_alias = "energy", allow_negative_numbers = true)]
    pub energy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Inline values "1,2,4", or FILE.csv[:ROW] with ROW counted from 0.
    #[arg(long)]
    pub profile: String,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Klt,
    Lt,
    Goq,
    Lbg,
    Uniform,
    Iterative,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub kind: FitKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Latent dimension.
    #[arg(long)]
    pub k: Option<usize>,
    /// Total codebook bits (quantizers only).
    #[arg(long)]
    pub bits: Option<u32>,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Precoder or model file to quantize on; without it an LT precoder is
    /// trained first.
    #[arg(long)]
    pub precoder: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub it_max: Option<usize>,
    #[arg(long, value_enum)]
    pub goq_init: Option<GoqInitArg>,
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GoqInitArg {
    Random,
    Nested,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "experiment")]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "experiment", required_unless_present = "experiment")]
    pub model: Option<PathBuf>,
    /// Experiment config (JSON); runs every sweep and writes plot CSVs.
    #[arg(long)]
    pub experiment: Option<PathBuf>,
    /// Score train and test parts of a seeded split with this train fraction.
    #[arg(long, conflicts_with = "test")]
    pub split: Option<f64>,
    /// Separate test CSV.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Pick cells by latent distance instead of goal loss.
    #[arg(long)]
    pub latent_only: bool,
    /// Directory for report files.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub t: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with generator parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Defaults read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub p: Option<Norm>,
    #[serde(rename = "E")]
    pub energy: Option<f64>,
    pub k: Option<usize>,
    pub bits: Option<u32>,
    pub seed: Option<u64>,
    pub split: Option<f64>,
    pub train: Option<TrainConfig>,
    pub synthetic: Option<SyntheticParams>,
}

/// Everything a run depends on, logged to stderr before it starts.
#[derive(Debug, Clone, Serialize)]
struct Resolved<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<FitKind>,
    p: Norm,
    #[serde(rename = "E")]
    energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    threads: Option<usize>,
}

/// Failure split by exit code: bad input exits 2, anything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Training errors caused by the request itself count as usage errors.
fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::DegenerateGradient
        | Error::ModelMismatch(_)
        | Error::Row { .. }
        | Error::Empty(_)
        | Error::NonFinite(_) => usage(e),
        other => runtime(other),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: serde_json::Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            print!("{}", text());
        }
    }
}

fn read_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn thread_limit() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(usage(format!("{THREADS_VAR} must be >= 1")));
            }
            exec::set_thread_limit(n);
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn resolve_spec(task: &TaskArgs, file: &FileConfig, fallback: Option<&Precoder>) -> CliResult<TaskSpec> {
    let meta = fallback.map(|p| &p.meta);
    let p = task
        .p
        .or(file.p)
        .or(meta.and_then(|m| m.p))
        .unwrap_or(Norm::Infinity);
    let energy = task
        .energy
        .or(file.energy)
        .or(meta.and_then(|m| m.energy))
        .unwrap_or(DEFAULT_ENERGY);
    TaskSpec::new(p, energy).map_err(usage)
}

fn resolve_train(args: &TrainArgs, file: &FileConfig, seed: u64) -> TrainConfig {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(v) = args.it_max {
        cfg.it_max = v;
    }
    if let Some(v) = args.goq_init {
        cfg.goq_init = match v {
            GoqInitArg::Random => GoqInit::Random,
            GoqInitArg::Nested => GoqInit::Nested,
        };
    }
    if let Some(v) = args.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = args.outer_iters {
        cfg.outer_j_max = v;
    }
    cfg.seed = seed;
    cfg
}

fn log_resolved(r: &Resolved<'_>) {
    eprintln!("resolved config: {}", serde_json::to_string(r).expect("config serializes"));
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_profiles_csv(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_profile(arg: &str) -> CliResult<Vec<f64>> {
    let inline: Result<Vec<f64>, _> = arg.split(',').map(|c| c.trim().parse::<f64>()).collect();
    if let Ok(values) = inline {
        return Ok(values);
    }
    let (path, row) = match arg.rsplit_once(':') {
        Some((p, r)) if r.chars().all(|c| c.is_ascii_digit()) && !r.is_empty() => {
            (p, r.parse::<usize>().map_err(usage)?)
        }
        _ => (arg, 0),
    };
    let data = load_data(Path::new(path))?;
    if row >= data.len() {
        return Err(usage(format!("{path} has {} rows, asked for row {row}", data.len())));
    }
    Ok(data.row(row).to_vec())
}

fn cmd_solve(args: &SolveArgs, file: &FileConfig, out: &Output) -> CliResult<()> {
    let spec = resolve_spec(&args.task, file, None)?;
    log_resolved(&Resolved {
        command: "solve",
        kind: None,
        p: spec.p,
        energy: spec.energy,
        k: None,
        bits: None,
        seed: 0,
        train: None,
        threads: thread_limit()?,
    });
    let l = parse_profile(&args.profile)?;
    let d = solve_waterfill(&l, &spec).map_err(usage)?;
    let u = utility(&d.x, &l, &spec).map_err(runtime)?;
    out.emit(
        json!({
            "x": d.x,
            "water_level": d.water_level,
            "active_count": d.active_count,
            "utility": u,
        }),
        || {
            format!(
                "x = {}\nwater_level = {}\nactive_count = {}\nutility = {}\n",
                join(&d.x),
                d.water_level,
                d.active_count,
                u
            )
        },
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs, file: &FileConfig, out: &Output) -> CliResult<()> {
    let needs_bits = !matches!(args.kind, FitKind::Klt | FitKind::Lt);
    let k = args.k.or(file.k);
    let bits = args.bits.or(file.bits);
    if needs_bits && bits.is_none() {
        return Err(usage(format!("fit {:?} needs --bits", args.kind).to_lowercase()));
    }
    if !needs_bits && args.bits.is_some() {
        return Err(usage("--bits only applies to quantizers"));
    }
    if args.precoder.is_some() && !matches!(args.kind, FitKind::Goq | FitKind::Lbg | FitKind::Uniform) {
        return Err(usage("--precoder only applies to goq, lbg and uniform"));
    }
    let base = match &args.precoder {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Some(read_model_precoder(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let k = match (k, &base) {
        (Some(k), Some(p)) if k != p.k() => {
            return Err(usage(format!("--k {k} disagrees with the precoder's K = {}", p.k())));
        }
        (Some(k), _) => k,
        (None, Some(p)) => p.k(),
        (None, None) => return Err(usage("--k is required")),
    };
    let spec = resolve_spec(&args.task, file, base.as_ref())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let cfg = resolve_train(&args.train, file, seed);
    log_resolved(&Resolved {
        command: "fit",
        kind: Some(args.kind),
        p: spec.p,
        energy: spec.energy,
        k: Some(k),
        bits: if needs_bits { bits } else { None },
        seed,
        train: Some(&cfg),
        threads: thread_limit()?,
    });
    let data = load_data(&args.data)?;

    let lt = |data: &Dataset| -> CliResult<Precoder> {
        match &base {
            Some(p) => Ok(p.clone()),
            None => Ok(fit_linear_precoder(data, &spec, k, &cfg).map_err(classify)?.precoder),
        }
    };
    let (text, trace) = match args.kind {
        FitKind::Klt => {
            let p = klt_basis_with(&data, k, cfg.centered_klt).map_err(classify)?;
            let loss = empirical_loss(&p, &data, &spec).map_err(classify)?;
            (p.to_json().map_err(runtime)?, vec![loss])
        }
        FitKind::Lt => {
            let fit = fit_linear_precoder(&data, &spec, k, &cfg).map_err(classify)?;
            (fit.precoder.to_json().map_err(runtime)?, fit.trace)
        }
        FitKind::Goq | FitKind::Lbg => {
            let precoder = lt(&data)?;
            let bits = bits.expect("checked above");
            let fit = if args.kind == FitKind::Goq {
                fit_goq(&data, &precoder, &spec, bits, &cfg)
            } else {
                fit_lbg(&data, &precoder, bits, &cfg)
            }
            .map_err(classify)?;
            let codebook = rebind(&fit.codebook, &precoder, &spec).map_err(classify)?;
            let model = Model::Quantized {
                precoder,
                codebook,
                rule: EncodeRule::GoalAware,
            };
            (model.to_json(&fit.trace).map_err(runtime)?, fit.trace)
        }
        FitKind::Uniform => {
            let precoder = lt(&data)?;
            let codebook =
                uniform_scalar_quantizer(&data, &precoder, &spec, bits.expect("checked above")).map_err(classify)?;
            let model = Model::Quantized {
                precoder,
                codebook,
                rule: EncodeRule::GoalAware,
            };
            (model.to_json(&[]).map_err(runtime)?, Vec::new())
        }
        FitKind::Iterative => {
            let state = fit_iterative(&data, &spec, k, bits.expect("checked above"), &cfg).map_err(classify)?;
            let text = serde_json::to_string_pretty(&state.to_bundle()).map_err(runtime)?;
            (text, state.loss_trace)
        }
    };
    write_text(&args.out, &(text + "\n"))?;
    out.emit(
        json!({ "model": args.out, "loss_trace": trace }),
        || format!("wrote {}\nloss_trace = {}\n", args.out.display(), join(&trace)),
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: PathBuf,
    p: Norm,
    #[serde(rename = "E")]
    energy: f64,
    rule: EncodeRule,
    rsol: Option<f64>,
    rsol_train: Option<f64>,
    rsol_test: Option<f64>,
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig, out: &Output) -> CliResult<()> {
    if let Some(path) = &args.experiment {
        return cmd_experiment(args, path, out);
    }
    let model_path = args.model.as_ref().expect("clap enforces --model");
    let data_path = args.data.as_ref().expect("clap enforces --data");
    let text =
        fs::read_to_string(model_path).map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
    let precoder = read_model_precoder(&text).map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
    let spec = resolve_spec(&args.task, file, Some(&precoder))?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    log_resolved(&Resolved {
        command: "eval",
        kind: None,
        p: spec.p,
        energy: spec.energy,
        k: Some(precoder.k()),
        bits: None,
        seed,
        train: None,
        threads: thread_limit()?,
    });
    let mut model = Model::from_json(&text, &spec).map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
    let rule = if args.latent_only {
        EncodeRule::LatentOnly
    } else {
        EncodeRule::GoalAware
    };
    if let Model::Quantized { rule: r, .. } = &mut model {
        *r = rule;
    }
    let data = load_data(data_path)?;
    if data.dim() != precoder.n() {
        return Err(usage(format!(
            "{} has N = {}, model expects N = {}",
            data_path.display(),
            data.dim(),
            precoder.n()
        )));
    }
    let score = |d: &Dataset| model.rsol(d, &spec).map_err(classify);
    let mut report = EvalReport {
        model: model_path.clone(),
        p: spec.p,
        energy: spec.energy,
        rule,
        rsol: None,
        rsol_train: None,
        rsol_test: None,
    };
    let split = args.split.or(if args.test.is_none() { file.split } else { None });
    if let Some(f) = split {
        let (train, test) = split_dataset(&data, f, seed).map_err(usage)?;
        report.rsol_train = Some(score(&train)?);
        if !test.is_empty() {
            report.rsol_test = Some(score(&test)?);
        }
    } else if let Some(test_path) = &args.test {
        let test = load_data(test_path)?;
        report.rsol_train = Some(score(&data)?);
        report.rsol_test = Some(score(&test)?);
    } else {
        report.rsol = Some(score(&data)?);
    }
    if let Some(dir) = &args.out_dir {
        let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
        write_text(&dir.join("eval.json"), &(text + "\n"))?;
    }
    let value = serde_json::to_value(&report).map_err(runtime)?;
    out.emit(value, || {
        let mut s = String::new();
        for (name, v) in [
            ("rsol", report.rsol),
            ("rsol_train", report.rsol_train),
            ("rsol_test", report.rsol_test),
        ] {
            if let Some(v) = v {
                s.push_str(&format!("{name} = {v}\n"));
            }
        }
        s
    });
    Ok(())
}

fn cmd_experiment(args: &EvalArgs, path: &Path, out: &Output) -> CliResult<()> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.task.p {
        cfg.spec.p = p;
    }
    if let Some(e) = args.task.energy {
        cfg.spec.energy = e;
    }
    if let Some(f) = args.split {
        cfg.split = f;
    }
    if args.latent_only {
        cfg.encode_rule = EncodeRule::LatentOnly;
    }
    cfg.validate().map_err(usage)?;
    let threads = thread_limit()?;
    eprintln!(
        "resolved config: {}",
        json!({ "command": "eval", "experiment": cfg, "threads": threads })
    );
    let report: Report = run_experiment(&cfg).map_err(classify)?;
    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("goalcomp-report"));
    let files = emit_report(&report, &dir).map_err(runtime)?;
    out.emit(
        json!({
            "determinism_hash": report.determinism_hash,
            "files": files,
            "entries": report.entries,
        }),
        || {
            let mut s = String::from("sweep\tvalue\tmethod\trsol_train\trsol_test\n");
            for e in &report.entries {
                let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}{}\n",
                    e.sweep,
                    e.sweep_value,
                    e.method,
                    cell(e.rsol_train),
                    cell(e.rsol_test),
                    e.error.as_ref().map(|m| format!("\terror: {m}")).unwrap_or_default()
                ));
            }
            s.push_str(&format!("report written to {}\n", dir.display()));
            s
        },
    );
    Ok(())
}

fn cmd_gen(args: &GenArgs, file: &FileConfig, out: &Output) -> CliResult<()> {
    let params = match &args.params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => file.synthetic.clone().unwrap_or_default(),
    };
    let seed = args.seed.or(file.seed).unwrap_or(0);
    eprintln!(
        "resolved config: {}",
        json!({ "command": "gen", "t": args.t, "n": args.n, "seed": seed, "params": params })
    );
    let data = gen_synthetic(args.t, args.n, seed, &params).map_err(usage)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    write_profiles_csv(&data, &args.out).map_err(runtime)?;
    out.emit(
        json!({ "out": args.out, "t": data.len(), "n": data.dim() }),
        || format!("wrote {} ({} x {})\n", args.out.display(), data.len(), data.dim()),
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    let file = read_file_config(cli.config.as_deref())?;
    let out = Output { json: cli.json };
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, &file, &out),
        Command::Fit(a) => cmd_fit(a, &file, &out),
        Command::Eval(a) => cmd_eval(a, &file, &out),
        Command::Gen(a) => cmd_gen(a, &file, &out),
    }
}

/// Parses `std::env::args`, runs, reports errors, and returns the exit code.
pub fn main_with_args() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 2 && std::env::args().any(|a| a == "--json") {
                println!("{}", json!({ "error": e.kind().to_string(), "exit_code": code }));
            }
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
