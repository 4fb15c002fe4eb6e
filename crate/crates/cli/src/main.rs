//! `sfe`: train, evaluate, sweep and inspect SFE models.
//!
//! Machine-readable JSON goes to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 2 configuration, 3 data, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sfe_core::data::{cifar, plain_batch, LabeledImageDataset};
use sfe_core::diagnostics::{self, sweep};
use sfe_core::trainer::{self, Checkpoint, ExperimentConfig, Seeds, Trainer};
use sfe_core::{InferenceScheme, SfeError};

#[derive(Parser)]
#[command(name = "sfe", version, about = "Self-supervised feature enhancement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Sets the model, data and partition seeds at once.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.sfe` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy of a checkpoint under one inference scheme.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// si, ag or sd.
        #[arg(long, default_value = "si")]
        scheme: InferenceScheme,
        /// `test`, `train`, or a CIFAR-10 .bin file.
        #[arg(long, default_value = "test")]
        data: String,
    },
    /// Run a grid of experiments and write one CSV row per cell and seed.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the class activation map of one image as a PGM file.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        data: String,
    },
    /// Print heads, partitions, K, β and training progress of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(e: &SfeError) -> u8 {
    match e {
        SfeError::Config(_) | SfeError::Shape(_) => 2,
        SfeError::Data(_) | SfeError::Format { .. } | SfeError::Io { .. } | SfeError::Json(_) => 3,
        SfeError::Numeric(_) => 4,
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn load_ck(path: &Path) -> sfe_core::Result<Checkpoint<f32>> {
    trainer::load_checkpoint(path)
}

fn eval_split(ck: &Checkpoint<f32>, data: &str) -> sfe_core::Result<LabeledImageDataset> {
    match data {
        "test" | "train" => {
            let (train, test) = ck.config.dataset.load()?;
            Ok(if data == "train" { train } else { test })
        }
        path => cifar::parse_cifar10_bin(path),
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path, resume: bool) -> sfe_core::Result<()> {
    let mut cfg = ExperimentConfig::load(config).map_err(|e| match e {
        SfeError::Io { path, source } => SfeError::config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seeds = Seeds::all(s);
    }
    let mut t = Trainer::<f32>::new(cfg)?;
    emit(json!({"resolved_config": t.config, "config_hash": t.config.hash()}));
    let paths = trainer::RunPaths::new(out);
    if resume && paths.checkpoint.is_file() {
        let ck = trainer::load_checkpoint_for::<f32>(&paths.checkpoint, &t.config)?;
        eprintln!("resuming at epoch {}", ck.epoch);
        t = Trainer::resume_with_data(ck, t.train_set, t.test_set)?;
    } else if paths.metrics.exists() {
        std::fs::remove_file(&paths.metrics).map_err(|e| SfeError::io(&paths.metrics, e))?;
    }
    let recs = t.run(Some(out))?;
    for r in &recs {
        emit(serde_json::to_value(r)?);
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, scheme: InferenceScheme, data: &str) -> sfe_core::Result<()> {
    let ck = load_ck(checkpoint)?;
    if !ck.model.supports(scheme) {
        return Err(SfeError::config(format!(
            "scheme {scheme} needs a distillation-trained checkpoint"
        )));
    }
    let ds = eval_split(&ck, data)?;
    let acc = trainer::evaluate(&ck.model, &ds, &ck.config.normalization(), scheme, ck.config.batch.eval)?;
    emit(json!({"scheme": scheme.short_name(), "accuracy": acc, "n": ds.len()}));
    Ok(())
}

fn run_sweep(grid: &Path, out: &Path, jobs: usize) -> sfe_core::Result<()> {
    let g = sweep::SweepGrid::load(grid)?;
    let rows = sweep::run_sweep(&g, jobs)?;
    sweep::write_csv_file(&rows, out)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let mut summary = json!({"rows": rows.len(), "failed": failed, "out": out});
    if g.betas.len() > 1 {
        let curve_path = out.with_extension("beta.csv");
        sweep::write_beta_curve(&sweep::beta_curve(&rows), &curve_path)?;
        summary["beta_curve"] = json!(curve_path);
    }
    emit(summary);
    Ok(())
}

fn cam(checkpoint: &Path, image: usize, class_id: usize, out: &Path, data: &str) -> sfe_core::Result<()> {
    let ck = load_ck(checkpoint)?;
    let ds = eval_split(&ck, data)?;
    if image >= ds.len() {
        return Err(SfeError::config(format!("image {image} outside the {} samples", ds.len())));
    }
    let (x, _) = plain_batch::<f32>(&ds, &[image], &ck.config.normalization())?;
    let mut map = diagnostics::compute_cam(&ck.model, &x, class_id)?;
    map.image_id = Some(image);
    diagnostics::export_cam_pgm(&map, out)?;
    emit(json!({
        "class": class_id,
        "image": image,
        "label": ds.labels[image],
        "source": map.source,
        "width": map.width,
        "height": map.height,
        "out": out,
    }));
    Ok(())
}

fn inspect(checkpoint: &Path) -> sfe_core::Result<()> {
    let ck = load_ck(checkpoint)?;
    let m = &ck.model;
    let heads: Vec<_> = m
        .heads
        .iter()
        .map(|h| {
            json!({
                "stage": h.head.stage + 1,
                "weight_shape": [h.head.outputs(), h.head.in_features],
                "classes": h.head.classes,
                "transforms": h.head.transforms,
                "partition": h.partition.as_ref().map(|p| p.groups().map(|g| g.to_vec()).collect::<Vec<_>>()),
            })
        })
        .collect();
    emit(json!({
        "mode": m.plan.mode,
        "k": m.plan.k,
        "K": m.transforms(),
        "beta": m.plan.beta,
        "distill": m.plan.distill,
        "single_head": m.single.as_ref().map(|s| [s.classes, s.in_features]),
        "heads": heads,
        "epoch": ck.epoch,
        "step": ck.step,
        "parameters": m.num_parameters(),
        "config_hash": ck.config.hash(),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => train(&config, seed, &out, resume),
        Command::Eval {
            checkpoint,
            scheme,
            data,
        } => eval(&checkpoint, scheme, &data),
        Command::Sweep { grid, out, jobs } => run_sweep(&grid, &out, jobs),
        Command::Cam {
            checkpoint,
            image,
            class_id,
            out,
            data,
        } => cam(&checkpoint, image, class_id, &out, &data),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
