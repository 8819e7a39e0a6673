//! `cyclereg` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclereg::eval::{diag_curves, write_diag};
use cyclereg::io::{load_volume, save_volume};
use cyclereg::model::{load_checkpoint, Descriptor};
use cyclereg::synth::{gen_dataset, Manifest};
use cyclereg::training::{eval_set, train, Backend};
use cyclereg::transform::{save_field, warp_image, Interp};

use config::{resolve, write_snapshot, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<cyclereg::Error> for CliError {
    fn from(e: cyclereg::Error) -> Self {
        match e {
            cyclereg::Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cyclereg", version, about = "Multi-modal deformable registration via mono-modal cycles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file with `[data]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic bi-modal dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; defaults to `train.manifest`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing dataset.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a registration model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Register one volume pair with a trained checkpoint.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Receives `warped.nii.gz` and `field.nii.gz`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        /// Receives `eval.json`; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity-versus-overlap diagnostics from a metrics CSV.
    Diag {
        #[arg(long)]
        metrics: PathBuf,
        /// Receives `diag.csv` and `diag.json`; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let cfg = resolve(args.config.as_deref(), &args.overrides)?;
    cfg.data.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn parent_or_dot(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, &text).map_err(|e| CliError::io(path, e))?;
    Ok(text)
}

/// Snapshot of the command-line arguments of a command without a config file.
fn write_args_snapshot(dir: &Path, args: &serde_json::Value) -> Result<(), CliError> {
    write_json(&dir.join("resolved_args.json"), args).map(|_| ())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { cfg, out, overwrite } => {
            let cfg = load_config(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.train.manifest.clone());
            let m = gen_dataset(&cfg.data, &out, overwrite)?;
            write_snapshot(&cfg, &out)?;
            println!(
                "wrote {} subjects to {} (initial dsc {:.4})",
                m.entries.len(),
                out.display(),
                m.initial_metrics.dsc
            );
        }
        Command::Train { cfg, out } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(out) = out {
                cfg.train.out_dir = out;
            }
            let outcome = train(&cfg.train)?;
            write_snapshot(&cfg, &cfg.train.out_dir)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {}: dsc {:.4}, negjac {:.4}%, lncc_mm {:.4}",
                    last.step, last.eval_dsc, last.eval_negjac, last.eval_lncc_mm
                );
            }
        }
        Command::Register {
            checkpoint,
            source,
            target,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint, None)?;
            let (s, t) = (load_volume(&source)?, load_volume(&target)?);
            let field = ckpt.model.predict_field(&s, &t)?;
            let warped = warp_image(&s, &field, Interp::Linear)?;
            fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            save_volume(&warped, out.join("warped.nii.gz"))?;
            save_field(&field, out.join("field.nii.gz"))?;
            write_args_snapshot(
                &out,
                &serde_json::json!({
                    "command": "register",
                    "checkpoint": checkpoint,
                    "source": source,
                    "target": target,
                }),
            )?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint, None)?;
            let backend = match ckpt.model.descriptor {
                Descriptor::Amortized(_) => Backend::Amortized,
                Descriptor::FieldBank { .. } => Backend::FieldBank,
            };
            let (m, root) = Manifest::load(&manifest)?;
            let summary = eval_set(&m, &root, backend)?.evaluate(&ckpt.model)?;
            let out = out.unwrap_or_else(|| parent_or_dot(&checkpoint));
            fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            let text = write_json(&out.join("eval.json"), &summary)?;
            write_args_snapshot(
                &out,
                &serde_json::json!({
                    "command": "eval",
                    "checkpoint": checkpoint,
                    "manifest": manifest,
                }),
            )?;
            println!("{text}");
        }
        Command::Diag { metrics, out } => {
            let diag = diag_curves(&metrics)?;
            let out = out.unwrap_or_else(|| parent_or_dot(&metrics));
            fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            write_diag(&diag, &out, "diag")?;
            println!(
                "spearman(lncc, step) {:.3}, spearman(lncc, dsc) {:.3}, delta dsc {:+.4}",
                diag.summary.spearman_lncc_step, diag.summary.spearman_lncc_dsc, diag.summary.delta_dsc
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
