//! Command-line front end. Each subcommand runs one pipeline stage and
//! prints the path of every artifact it writes, one per line.
//!
//! Exit codes: 0 on success, 1 on a stage failure (reported on stderr as a
//! single `ERROR <stage> <message>` line), 2 on bad arguments.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::archive::MANIFEST_NAME;
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate_masks, run_eval, run_infer, run_synth, run_threshold, run_train, write_config, PipelineConfig,
};
use crate::raster::read_raster;

#[derive(Debug, Parser)]
#[command(name = "sslcd", version, about = "Self-supervised change detection on image archives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic archive.
    Synth(Common),
    /// Train one model per scale and replicate.
    Train(Common),
    /// Compute per-scale and fused change maps for the held-out pairs.
    Infer(Common),
    /// Binarize fused maps.
    Threshold(Common),
    /// Score masks against the reference, or one mask file against another.
    Eval(EvalArgs),
    /// Run every stage in order.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Archive directory.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `homogeneous` or `heterogeneous`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated patch sides.
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `auto`, `min` or `rosin`.
    #[arg(long)]
    pub threshold_method: Option<String>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predicted mask; with `--gt`, scores this pair only.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Reference mask.
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Use the existing archive instead of generating one.
    #[arg(long)]
    pub no_synth: bool,
}

impl Common {
    /// File values first, then named flags, then `--set` pairs in order.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::read(path)?,
            None => PipelineConfig::new(crate::encoder::Mode::Homogeneous),
        };
        let named = [
            ("mode", self.mode.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("archive", self.archive.as_ref().map(|p| p.display().to_string())),
            ("scales", self.scales.clone()),
            ("steps", self.steps.map(|s| s.to_string())),
            ("threshold_method", self.threshold_method.clone()),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Threshold(_) => "threshold",
        Command::Eval(_) => "eval",
        Command::Pipeline(_) => "pipeline",
    }
}

fn print_paths(out: &mut impl Write, paths: &[PathBuf]) {
    for p in paths {
        let _ = writeln!(out, "{}", p.display());
    }
}

/// Runs one parsed command, printing artifact paths to `out`. Failures
/// carry the name of the stage that failed.
pub fn execute(cmd: &Command, out: &mut impl Write) -> std::result::Result<(), (&'static str, Error)> {
    let stage = stage_name(cmd);
    let at = |stage: &'static str| move |e: Error| (stage, e);
    match cmd {
        Command::Synth(c) => {
            let cfg = c.resolve().map_err(at(stage))?;
            print_paths(out, &run_synth(&cfg).map_err(at(stage))?);
        }
        Command::Train(c) => {
            let cfg = c.resolve().map_err(at(stage))?;
            let mut paths = vec![write_config(&cfg).map_err(at(stage))?];
            paths.extend(run_train(&cfg).map_err(at(stage))?);
            print_paths(out, &paths);
        }
        Command::Infer(c) => {
            let cfg = c.resolve().map_err(at(stage))?;
            print_paths(out, &run_infer(&cfg).map_err(at(stage))?);
        }
        Command::Threshold(c) => {
            let cfg = c.resolve().map_err(at(stage))?;
            print_paths(out, &run_threshold(&cfg).map_err(at(stage))?);
        }
        Command::Eval(e) => match (&e.pred, &e.gt) {
            (Some(pred), Some(gt)) => {
                let report = (|| evaluate_masks(&read_raster(pred)?, &read_raster(gt)?))().map_err(at(stage))?;
                let _ = writeln!(out, "{}", report.to_json());
            }
            _ => {
                let cfg = e.common.resolve().map_err(at(stage))?;
                print_paths(out, &run_eval(&cfg).map_err(at(stage))?);
            }
        },
        Command::Pipeline(p) => {
            let cfg = p.common.resolve().map_err(at(stage))?;
            cfg.validate().map_err(at(stage))?;
            if !p.no_synth || !cfg.archive.join(MANIFEST_NAME).exists() {
                print_paths(out, &run_synth(&cfg).map_err(at("synth"))?);
            }
            print_paths(out, &[write_config(&cfg).map_err(at(stage))?]);
            print_paths(out, &run_train(&cfg).map_err(at("train"))?);
            print_paths(out, &run_infer(&cfg).map_err(at("infer"))?);
            print_paths(out, &run_threshold(&cfg).map_err(at("threshold"))?);
            print_paths(out, &run_eval(&cfg).map_err(at("eval"))?);
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli.command, &mut lock) {
        Ok(()) => 0,
        Err((stage, e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR {stage} {msg}");
            1
        }
    }
}
