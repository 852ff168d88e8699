//! Command-line front end: data preparation, training, evaluation,
//! prediction, gradient checks and hyperparameter sweeps.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    bundle_loops, parse_jsonl, preprocess, split, write_jsonl, AntibodyRecord, Loop, LoopBundle,
    PreprocessOptions, AMINO_ACIDS,
};
use crate::diagnostics::{run_suite, suite_passed, GRADCHECK_TOL};
use crate::error::{Error, Result};
use crate::evaluation::{
    default_baselines, evaluate, parse_baselines, predict_with_sequence, write_report, AlignMode,
};
use crate::model::Mode;
use crate::synthetic::synthetic_dataset;
use crate::training::{fit, Checkpoint, EpochLog, TrainConfig};

pub const SEED_ENV: &str = "CDR_REFINE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cdr-refine",
    version,
    about = "Joint refinement of heavy-chain CDR loops"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, deduplicate and split a JSONL dataset.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted loop coordinates as JSONL records.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate across a range of kernel sizes or stage counts.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output stem; `.train.jsonl` and `.val.jsonl` files are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub max_res: f64,
    #[arg(long, default_value_t = 99.0)]
    pub identity: f64,
    /// JSONL of held-out records whose near-duplicates are removed.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Abort on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

/// Training options shared by `train` and `sweep`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub z: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub mpn_layers: Option<usize>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Where training records come from.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic records instead of reading `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Validation JSONL; without it a seeded 8:2 split of the data is used.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "loop")]
    pub align: String,
    /// `name = rmsd` file replacing the built-in baseline table.
    #[arg(long)]
    pub baselines: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "teacher_forced")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `z` (kernel size) or `q` (stages per loop).
    #[arg(long)]
    pub param: String,
    /// Inclusive range `a..b`.
    #[arg(long)]
    pub range: String,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand, tagged with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::Numerical(_) | Error::Tensor(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `a..b` (inclusive) stepped by `step`. An empty range is an error.
pub fn parse_range(text: &str, step: usize) -> CliResult<Vec<usize>> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| CliError::usage(format!("range '{text}' must look like a..b")))?;
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::usage(format!("bad range bound '{s}'")))
    };
    let (a, b) = (num(a)?, num(b)?);
    if step == 0 {
        return Err(CliError::usage("step must be positive"));
    }
    if a > b {
        return Err(CliError::usage(format!("range {text} is empty")));
    }
    Ok((a..=b).step_by(step).collect())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}='{v}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then the environment, then 0.
fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// Builds the training config. Precedence, lowest first: built-in defaults,
/// `CDR_REFINE_SEED`, the config file, flags, then `--set` entries.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_kv(&text)?;
    }
    if args.desk_scale {
        cfg.desk_scale = true;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("z", args.z.map(|v| v.to_string())),
        ("q", args.q.map(|v| v.to_string())),
        ("hidden", args.hidden.map(|v| v.to_string())),
        ("mpn_layers", args.mpn_layers.map(|v| v.to_string())),
        ("attention", args.attention.clone()),
        ("mode", args.mode.clone()),
        ("patience", args.patience.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bundles(records: &[AntibodyRecord]) -> Result<Vec<LoopBundle>> {
    records
        .iter()
        .map(|r| {
            bundle_loops(r).map_err(|source| Error::Record {
                pdb: r.pdb_id.clone(),
                source,
            })
        })
        .collect()
}

fn load_records(path: &Path, err: &mut dyn Write) -> Result<Vec<AntibodyRecord>> {
    let parsed = parse_jsonl(path, false)?;
    for e in &parsed.rejected {
        let _ = writeln!(err, "warning: {}: skipped {e}", path.display());
    }
    if parsed.records.is_empty() {
        return Err(Error::Contract(format!(
            "{}: no valid records",
            path.display()
        )));
    }
    Ok(parsed.records)
}

fn load_data(
    args: &DataArgs,
    seed: u64,
    err: &mut dyn Write,
) -> Result<(Vec<LoopBundle>, Vec<LoopBundle>)> {
    let records = match (&args.data, args.synthetic) {
        (Some(path), _) => load_records(path, err)?,
        (None, Some(n)) if n > 0 => synthetic_dataset(n, seed),
        _ => {
            return Err(Error::Config(
                "one of --data or --synthetic N (N > 0) is required".into(),
            ))
        }
    };
    match &args.val {
        Some(path) => Ok((bundles(&records)?, bundles(&load_records(path, err)?)?)),
        None if records.len() >= 2 => {
            let (train, val) = split(&records, 0.8, seed);
            Ok((bundles(&train)?, bundles(&val)?))
        }
        None => Ok((bundles(&records)?, Vec::new())),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let name = stem
        .file_stem()
        .map_or_else(|| "clean".to_string(), |s| s.to_string_lossy().into_owned());
    stem.with_file_name(format!("{name}.{suffix}.jsonl"))
}

fn cmd_prepare(a: &PrepareArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(CliError::usage("--split must lie strictly between 0 and 1"));
    }
    let _ = writeln!(
        out,
        "max_res = {}\nidentity = {}\nsplit = {}\nseed = {seed}",
        a.max_res, a.identity, a.split
    );
    let parsed = parse_jsonl(&a.input, a.strict).map_err(Error::from)?;
    for e in &parsed.rejected {
        let _ = writeln!(err, "warning: skipped {e}");
    }
    let exclude = match &a.exclude {
        Some(p) => parse_jsonl(p, false)
            .map_err(Error::from)?
            .records
            .into_iter()
            .map(|r| r.heavy_seq)
            .collect(),
        None => Vec::new(),
    };
    let opts = PreprocessOptions {
        max_resolution: a.max_res,
        identity_cutoff: a.identity,
        exclude,
    };
    let clean = preprocess(&parsed.records, &opts);
    let (train, val) = split(&clean, a.split, seed);
    let (tp, vp) = (with_suffix(&a.out, "train"), with_suffix(&a.out, "val"));
    if let Some(dir) = tp.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&tp, &train).map_err(Error::from)?;
    write_jsonl(&vp, &val).map_err(Error::from)?;
    let _ = writeln!(
        out,
        "read {} records ({} rejected), kept {}, train {} -> {}, val {} -> {}",
        parsed.records.len(),
        parsed.rejected.len(),
        clean.len(),
        train.len(),
        tp.display(),
        val.len(),
        vp.display()
    );
    Ok(())
}

fn log_header() -> &'static str {
    "epoch,l_seq,l_d,l_beta,l_ca,l_struct,total,val_total"
}

fn log_line(log: &EpochLog) -> String {
    let t = &log.train;
    format!(
        "{},{},{},{},{},{},{},{}",
        log.epoch,
        t.l_seq,
        t.l_d,
        t.l_beta,
        t.l_ca,
        t.l_struct,
        t.total,
        log.val_total.map_or(String::new(), |v| v.to_string())
    )
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve_config(&a.config)?;
    cfg.checkpoint_dir = Some(a.out.clone());
    let _ = write!(out, "{}", cfg.to_kv());
    let (train, val) = load_data(&a.data, cfg.seed, err)?;
    let _ = writeln!(
        out,
        "train records = {}, val records = {}",
        train.len(),
        val.len()
    );
    let mut csv = String::from(log_header());
    csv.push('\n');
    let outcome = fit(&train, &val, &cfg, |log| {
        let line = log_line(log);
        let _ = writeln!(out, "{line}");
        csv.push_str(&line);
        csv.push('\n');
    })?;
    let path = a.out.join("loss_log.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let _ = writeln!(
        out,
        "best epoch {} (metric {}), checkpoints in {}",
        outcome.best.epoch,
        outcome
            .best
            .val_metric
            .map_or("n/a".into(), |v| v.to_string()),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let align: AlignMode = a.align.parse()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let _ = writeln!(out, "{}align = {:?}", ck.config.to_kv(), align);
    let model = ck.model()?;
    let baselines = match &a.baselines {
        Some(p) => parse_baselines(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => default_baselines(),
    };
    let data = bundles(&load_records(&a.data, err)?)?;
    let report = evaluate(&model, &data, align, &baselines)?;
    write_report(&report, &a.out)?;
    let _ = writeln!(
        out,
        "records = {}\nmean RMSD H1 = {:.4}, H2 = {:.4}, H3 = {:.4}",
        data.len(),
        report.mean_h1,
        report.mean_h2,
        report.mean_h3
    );
    for (len, v) in &report.h3_by_length {
        let _ = writeln!(out, "H3 length {len}: {v:.4}");
    }
    for row in &report.improvements {
        let _ = writeln!(
            out,
            "vs {} ({:.4}): {:.3}%",
            row.method, row.baseline, row.improvement_pct
        );
    }
    Ok(())
}

/// Copies `record` with its loop coordinates (and, in generative mode,
/// loop residues) replaced by the model's output.
pub fn predicted_record(
    record: &AntibodyRecord,
    bundle: &LoopBundle,
    pred: &[crate::geometry::Backbone],
    seq: &[usize],
) -> AntibodyRecord {
    let mut out = record.clone();
    let mut letters = out.heavy_seq.clone().into_bytes();
    for lp in Loop::ALL {
        for (pos, k) in record.span(lp).range().zip(bundle.loop_range(lp)) {
            out.coords.n[pos] = Some(pred[k].n);
            out.coords.ca[pos] = Some(pred[k].ca);
            out.coords.c[pos] = Some(pred[k].c);
            letters[pos] = AMINO_ACIDS[seq[k]];
        }
    }
    out.heavy_seq = String::from_utf8(letters).expect("amino-acid letters are ASCII");
    out
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mode: Mode = a.mode.parse()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let _ = writeln!(out, "{}predict_mode = {mode}", ck.config.to_kv());
    let model = ck.model()?;
    let records = load_records(&a.record, err)?;
    let mut text = String::new();
    for r in &records {
        let b = bundles(std::slice::from_ref(r))?.remove(0);
        let (pred, seq) = predict_with_sequence(&model, &b, mode)?;
        let _ = writeln!(text, "{}", predicted_record(r, &b, &pred, &seq).to_json());
    }
    std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    let _ = writeln!(
        out,
        "wrote {} records to {}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    let _ = writeln!(out, "seed = {seed}\ntolerance = {GRADCHECK_TOL}");
    let results = run_suite(seed)?;
    for r in &results {
        let status = match (r.passed(), r.gating) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "warn",
        };
        let _ = writeln!(
            out,
            "{status} {:<44} max rel err {:.3e} (eps {:e}, {} coords{})",
            r.name,
            r.max_rel_error,
            r.eps,
            r.checked,
            if r.gating { "" } else { ", informational" }
        );
    }
    if suite_passed(&results) {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERICAL,
            message: "gradient check failed".into(),
        })
    }
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let values = parse_range(&a.range, a.step)?;
    if !matches!(a.param.as_str(), "z" | "q") {
        return Err(CliError::usage(format!(
            "--param must be z or q, got '{}'",
            a.param
        )));
    }
    let base = resolve_config(&a.config)?;
    let _ = writeln!(out, "{}sweep {} over {:?}", base.to_kv(), a.param, values);
    let (train, val) = load_data(&a.data, base.seed, err)?;
    let eval_set = if val.is_empty() { &train } else { &val };
    let mut csv = String::from("param,value,mean_h1,mean_h2,mean_h3,final_train_loss\n");
    for v in values {
        let mut cfg = base.clone();
        cfg.set(&a.param, &v.to_string())?;
        cfg.validate()?;
        let outcome = fit(&train, &val, &cfg, |_| {})?;
        let model = outcome.best.model()?;
        let report = evaluate(&model, eval_set, AlignMode::Loop, &[])?;
        let last = outcome.history.last().map_or(f64::NAN, |l| l.train.total);
        let line = format!(
            "{},{v},{},{},{},{last}",
            a.param, report.mean_h1, report.mean_h2, report.mean_h3
        );
        let _ = writeln!(err, "{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None => {
            let _ = write!(out, "{csv}");
        }
    }
    Ok(())
}

/// Runs a parsed command.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a, out, err),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Predict(a) => cmd_predict(a, out, err),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Sweep(a) => cmd_sweep(a, out, err),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
