//! Command-line dispatch.
//!
//! Exit status: 0 on success, 2 for usage and configuration problems
//! (including missing input artifacts), 1 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{LormError, Result};
use crate::eval::{evaluate_records, WearTable};
use crate::monitor::{alarm_line, calibrate_threshold, hi_by_cut, hi_csv, monitor_threaded, read_hi_csv, WindowScorer};
use crate::pipeline;
use crate::signal::{MultiChannelSeries, SignalWindow, WindowStream};
use crate::synth::generate_run;
use crate::tokenizer::CodebookSet;

pub const SIGNAL_FILE: &str = "signal.csv";
pub const WEAR_FILE: &str = "wear.csv";
pub const CODEBOOKS_FILE: &str = "codebooks.json";
pub const PRETRAINED_FILE: &str = "pretrained.lorm";
pub const PRETRAIN_CODEBOOKS_FILE: &str = "pretrain_codebooks.json";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.lorm";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const HI_FILE: &str = "hi.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "lorm", version, about = "Token-prediction condition monitoring for multi-sensor signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for splitting, k-means, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic run (signal.csv, wear.csv).
    Synth,
    /// Fit per-channel token codebooks (codebooks.json).
    FitCodebooks,
    /// Train every parameter on the synthetic pretraining corpus.
    Pretrain,
    /// Partially fine-tune with attention and feed-forward weights frozen.
    Train,
    /// Score a stream window by window (hi.csv, alarm lines on stdout).
    Monitor,
    /// Derive the alarm threshold from a development HI trace and wear table.
    Calibrate,
    /// Classification metrics and detection deviation (metrics.json).
    Eval,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Diagnostics go to stderr, results to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &LormError) -> i32 {
    match err {
        LormError::InvalidConfig(_) | LormError::Missing(_) => 2,
        _ => 1,
    }
}

/// Loads the configuration named on the command line with overrides and the
/// seed applied.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        for key in ["seed", "train.seed", "pretrain.train.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Synth => synth(&cfg, out, stdout),
        Command::FitCodebooks => fit_codebooks(&cfg, out, stdout),
        Command::Pretrain => pretrain(&cfg, out, stdout),
        Command::Train => train(&cfg, out, stdout),
        Command::Monitor => monitor(&cfg, out, stdout),
        Command::Calibrate => calibrate(&cfg, out, stdout),
        Command::Eval => eval(&cfg, out, stdout),
    }
}

fn resolve(configured: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    configured.clone().unwrap_or_else(|| out.join(name))
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(LormError::Missing(format!("{what} not found at {}", path.display())))
    }
}

fn load_series(cfg: &RunConfig, out: &Path) -> Result<MultiChannelSeries> {
    let path = require(resolve(&cfg.paths.data, out, SIGNAL_FILE), "signal data")?;
    MultiChannelSeries::read_csv(path, cfg.sample_rate_hz)
}

fn load_codebooks(cfg: &RunConfig, out: &Path) -> Result<CodebookSet> {
    CodebookSet::load(require(resolve(&cfg.paths.codebooks, out, CODEBOOKS_FILE), "codebooks")?)
}

fn synth(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let run = generate_run(&cfg.synth)?;
    run.series.write_csv(out.join(SIGNAL_FILE))?;
    let wear = run.wear_table(&cfg.windowing()?);
    wear.write_csv(out.join(WEAR_FILE))?;
    writeln!(
        stdout,
        "wrote {} samples x {} channels, {} cuts (onset window {})",
        run.series.len(),
        run.series.channels(),
        wear.cuts.len(),
        run.onset_window(&cfg.windowing()?)
    )?;
    Ok(())
}

fn fit_codebooks(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let series = load_series(cfg, out)?;
    let codebooks = pipeline::fit_series_codebooks(cfg, &series)?;
    let path = resolve(&cfg.paths.codebooks, out, CODEBOOKS_FILE);
    codebooks.save(&path)?;
    writeln!(stdout, "codebooks K={} C={} hash={}", codebooks.k, codebooks.channels(), codebooks.content_hash())?;
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let model = pipeline::pretrain(cfg)?;
    model.checkpoint.save(out.join(PRETRAINED_FILE))?;
    model.codebooks.save(out.join(PRETRAIN_CODEBOOKS_FILE))?;
    model.report.write_csv(out.join(PRETRAIN_REPORT_FILE))?;
    writeln!(
        stdout,
        "pretrain: best val loss {:.6} at epoch {}",
        model.report.best_val_objective, model.report.best_epoch
    )?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let series = load_series(cfg, out)?;
    let codebooks = load_codebooks(cfg, out)?;
    let init_path = resolve(&cfg.paths.init_checkpoint, out, PRETRAINED_FILE);
    let init = if init_path.is_file() {
        Some(Checkpoint::load(&init_path)?.params)
    } else if cfg.paths.init_checkpoint.is_some() {
        return Err(LormError::Missing(format!("initial checkpoint not found at {}", init_path.display())));
    } else {
        log::warn!("no pretrained checkpoint at {}; starting from a fresh initialisation", init_path.display());
        None
    };
    let model = pipeline::finetune(cfg, &series, codebooks, init.as_ref())?;
    model.checkpoint.save(out.join(CHECKPOINT_FILE))?;
    model.report.write_csv(out.join(TRAIN_REPORT_FILE))?;
    writeln!(
        stdout,
        "train: best val loss {:.6} at epoch {}; frozen block {}",
        model.report.best_val_objective,
        model.report.best_epoch,
        if model.frozen_hash_before == model.frozen_hash_after { "unchanged" } else { "CHANGED" }
    )?;
    Ok(())
}

fn monitor(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let ck_path = require(resolve(&cfg.paths.checkpoint, out, CHECKPOINT_FILE), "checkpoint")?;
    let checkpoint = Checkpoint::load(ck_path)?;
    let codebooks = load_codebooks(cfg, out)?;
    let scorer = WindowScorer::new(checkpoint, codebooks)?;
    let windowing = scorer.checkpoint().windowing;
    let channels = scorer.channels();
    let tau = cfg.monitor.threshold;

    let windows: Box<dyn Iterator<Item = Result<SignalWindow>> + Send> = match &cfg.paths.stream_addr {
        Some(addr) => Box::new(WindowStream::connect(addr, windowing, channels)?),
        None => {
            let path = require(resolve(&cfg.paths.data, out, SIGNAL_FILE), "signal data")?;
            Box::new(WindowStream::open_csv(path, windowing, channels)?)
        }
    };
    let mut alarms = Vec::new();
    let records = monitor_threaded(windows, &scorer, cfg.monitor, |r| {
        if r.alarm {
            alarms.push(alarm_line(r, tau));
        }
    })?;
    for line in &alarms {
        writeln!(stdout, "{line}")?;
    }
    let wear_path = resolve(&cfg.paths.wear, out, WEAR_FILE);
    let wear = if wear_path.is_file() { Some(WearTable::read_csv(wear_path)?) } else { None };
    fs::write(resolve(&cfg.paths.hi, out, HI_FILE), hi_csv(&records, wear.as_ref(), None))?;
    writeln!(stdout, "monitor: {} windows, {} alarms", records.len(), alarms.len())?;
    Ok(())
}

fn calibrate(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let records = read_hi_csv(require(resolve(&cfg.paths.hi, out, HI_FILE), "HI trace")?)?;
    let wear = WearTable::read_csv(require(resolve(&cfg.paths.wear, out, WEAR_FILE), "wear table")?)?;
    let cal = calibrate_threshold(&hi_by_cut(&records, &wear), &wear, cfg.eval.wear_limit_um)?;
    fs::write(out.join(CALIBRATION_FILE), serde_json::to_string_pretty(&cal)?)?;
    writeln!(stdout, "tau={:?} (cut {}, wear {} um, {} windows)", cal.tau, cal.cut_id, cal.wear_um, cal.windows)?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let records = read_hi_csv(require(resolve(&cfg.paths.hi, out, HI_FILE), "HI trace")?)?;
    let wear = WearTable::read_csv(require(resolve(&cfg.paths.wear, out, WEAR_FILE), "wear table")?)?;
    let evaluation = evaluate_records(&records, &wear, cfg.eval.wear_limit_um)?;
    fs::write(out.join(METRICS_FILE), evaluation.to_json())?;
    write!(stdout, "{}", evaluation.to_table())?;
    Ok(())
}
