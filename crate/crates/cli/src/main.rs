use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fsr_core::evalkit::{cka_matrix, entropy_profile, evaluate, export_cam_maps};
use fsr_core::synthdata::generate_dataset;
use fsr_core::{load_checkpoint, save_checkpoint, Dataset, FsrError, RunConfig, Split, Trainer};
use log::info;

/// Environment variable that replaces the default output root (`runs`).
const RUN_ROOT_ENV: &str = "FSR_RUN_DIR";

#[derive(Parser)]
#[command(
    name = "fsr",
    version,
    about = "Weakly supervised segmentation with uncertainty-guided masking and self-distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override one field, e.g. `--set train.lambda4=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args)]
struct CheckpointArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Evaluate at most this many images (0 = all).
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Entropy,
    Cka,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and save its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory name under the output root.
        #[arg(long)]
        name: Option<String>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save the freshly initialized model without training.
        #[arg(long)]
        init_only: bool,
        /// Stop (and checkpoint) after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score pseudo labels and decoder predictions against ground truth.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Per-head attention entropy or layer-wise CKA of the encoder.
    Analyze {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum)]
        kind: AnalysisKind,
    },
    /// Write CAMs and pseudo labels as PNG and raw arrays.
    ExportCam {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for invalid input, 2 for failures during computation.
fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<FsrError>()
            .is_some_and(FsrError::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg } => gen_data(&load_config(&cfg)?),
        Command::Train {
            cfg,
            name,
            resume,
            init_only,
            max_steps,
        } => {
            let steps = if init_only {
                0
            } else {
                max_steps.unwrap_or(usize::MAX)
            };
            train(load_config(&cfg)?, name, resume, steps)
        }
        Command::Eval { ckpt } => eval(&ckpt),
        Command::Analyze { ckpt, kind } => analyze(&ckpt, kind),
        Command::ExportCam { ckpt } => export_cam(&ckpt),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    if !args.config.is_file() {
        return Err(FsrError::Config(format!(
            "config file {} does not exist",
            args.config.display()
        ))
        .into());
    }
    let mut cfg = RunConfig::load(&args.config)?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<name>` and writes the config snapshot into it.
fn open_run_dir(name: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = run_root().join(name);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    info!("run directory {}", dir.display());
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let root = generate_dataset(&cfg.data)?;
    write_json(&root.join("config.json"), cfg)?;
    info!(
        "wrote {} train and {} val images to {}",
        cfg.data.train_count,
        cfg.data.val_count,
        root.display()
    );
    Ok(())
}

fn load_or_generate(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    if !cfg.data.root.join("meta.json").is_file() {
        info!("no dataset at {}; generating it", cfg.data.root.display());
        generate_dataset(&cfg.data)?;
    }
    Ok(Dataset::load(&cfg.data.root, split)?)
}

fn train(
    cfg: RunConfig,
    name: Option<String>,
    resume: Option<PathBuf>,
    max_steps: usize,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            if ckpt.config.model != cfg.model || ckpt.config.data != cfg.data {
                bail!(FsrError::Config(format!(
                    "checkpoint {} was trained with a different model or dataset",
                    dir.display()
                )));
            }
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer.set_train_config(cfg.train.clone())?;
            trainer
        }
        None => Trainer::new(cfg.clone())?,
    };
    let name = name.unwrap_or_else(|| format!("train-{}", cfg.hash()));
    let dir = open_run_dir(&name, &trainer.config)?;
    if max_steps > 0 {
        let dataset = load_or_generate(&cfg, Split::Train)?;
        let metrics_path = dir.join("metrics.jsonl");
        let mut metrics = BufWriter::new(
            File::create(&metrics_path)
                .with_context(|| format!("creating {}", metrics_path.display()))?,
        );
        let every = cfg.train.log_every.max(1);
        let total = trainer.config.train.iterations;
        let mut done = 0;
        while trainer.state.iteration < total && done < max_steps {
            let batch = trainer.next_batch(&dataset)?;
            let r = trainer.step(&batch)?;
            done += 1;
            let line = serde_json::to_string(&r)?;
            writeln!(metrics, "{line}")
                .with_context(|| format!("writing {}", metrics_path.display()))?;
            if (r.iter + 1) % every == 0 || r.iter + 1 == total {
                info!(
                    "iter {}/{total} lr {:.2e} total {:.4} (cls {:.4} aff {:.4} seg {:.4} u {:.4} c {:.4})",
                    r.iter + 1,
                    r.lr,
                    r.total,
                    r.cls,
                    r.aff,
                    r.seg,
                    r.u,
                    r.c
                );
            }
        }
        metrics.flush()?;
    }
    let ckpt_dir = dir.join("checkpoint");
    save_checkpoint(&trainer.checkpoint(), &ckpt_dir)?;
    info!("saved checkpoint to {}", ckpt_dir.display());
    Ok(())
}

/// Loads the checkpoint and the requested split, returning the run
/// configuration with any `--data-root` applied.
fn open_checkpoint(args: &CheckpointArgs) -> Result<(Trainer, Dataset, RunConfig)> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(root) = &args.data_root {
        cfg.data.root = root.clone();
    }
    cfg.eval.split = args.split;
    if let Some(m) = args.max_images {
        cfg.eval.max_images = m;
    }
    let dataset = load_or_generate(&cfg, args.split)?;
    Ok((Trainer::from_checkpoint(ckpt)?, dataset, cfg))
}

fn eval(args: &CheckpointArgs) -> Result<()> {
    let (trainer, dataset, cfg) = open_checkpoint(args)?;
    let t = &cfg.train;
    let report = evaluate(
        &trainer.model,
        &trainer.state.student,
        &dataset,
        &cfg.data.class_names,
        t.beta_low,
        t.beta_high,
        cfg.eval.max_images,
    )?;
    let dir = open_run_dir(
        &format!("eval-{}-{}", args.split.dir_name(), cfg.hash()),
        &cfg,
    )?;
    let path = dir.join(format!("eval_{}.json", args.split.dir_name()));
    write_json(&path, &report)?;
    println!(
        "{} images: pseudo mIoU {:.2}, pred mIoU {:.2}",
        report.images, report.miou_pseudo, report.miou_pred
    );
    for c in &report.per_class {
        let fmt = |v: Option<f64>| v.map_or("   n/a".to_string(), |x| format!("{x:6.2}"));
        println!(
            "  {:<12} pseudo {} pred {}",
            c.class,
            fmt(c.pseudo),
            fmt(c.pred)
        );
    }
    info!("report written to {}", path.display());
    Ok(())
}

fn analyze(args: &CheckpointArgs, kind: AnalysisKind) -> Result<()> {
    let (trainer, dataset, cfg) = open_checkpoint(args)?;
    let (model, store, max) = (&trainer.model, &trainer.state.student, cfg.eval.max_images);
    let (label, rows) = match kind {
        AnalysisKind::Entropy => ("entropy", entropy_profile(model, store, &dataset, max)?),
        AnalysisKind::Cka => ("cka", cka_matrix(model, store, &dataset, max)?),
    };
    let dir = open_run_dir(&format!("analyze-{label}-{}", cfg.hash()), &cfg)?;
    let path = dir.join(format!("{label}.json"));
    write_json(
        &path,
        &serde_json::json!({ "kind": label, "split": args.split, "values": rows }),
    )?;
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{label}[{i}] {}", cells.join(" "));
    }
    info!("written to {}", path.display());
    Ok(())
}

fn export_cam(args: &CheckpointArgs) -> Result<()> {
    let (trainer, dataset, cfg) = open_checkpoint(args)?;
    let dir = open_run_dir(
        &format!("cams-{}-{}", args.split.dir_name(), cfg.hash()),
        &cfg,
    )?;
    let out = dir.join("cams");
    let t = &cfg.train;
    let n = export_cam_maps(
        &trainer.model,
        &trainer.state.student,
        &dataset,
        &out,
        t.beta_low,
        t.beta_high,
        cfg.eval.max_images,
    )?;
    println!("exported {n} images to {}", out.display());
    Ok(())
}
