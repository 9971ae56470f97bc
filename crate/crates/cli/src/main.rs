use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use weaksurg::checkpoint::Checkpoint;
use weaksurg::evaluate::{
    evaluate_stage, evaluate_with, predict_frame, write_pseudo_masks, ModelCams, OracleCams, Stage,
};
use weaksurg::pseudomask::{IdentityRefiner, PseudoMaskConfig};
use weaksurg::synthvid::{generate_dataset, read_dataset, write_dataset, SynthConfig};
use weaksurg::trainer::{Trainer, TrainConfig};
use weaksurg::Error;

/// Weakly supervised instrument segmentation from presence labels.
#[derive(Parser, Debug)]
#[command(name = "weaksurg", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic video dataset.
    Synth(SynthArgs),
    /// Train the encoder on a dataset.
    Train(TrainArgs),
    /// Score CAM seeds or pseudo masks against ground truth.
    Eval(EvalArgs),
    /// Write per-frame PNG panels of CAMs, seeds and instances.
    ExportPlots(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    clips: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML or JSON training config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out dataset scored at the end of training.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Use CAMs built from the ground-truth masks instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    #[arg(long)]
    data: PathBuf,
    /// cam_seed or pseudo_mask
    #[arg(long)]
    stage: String,
    /// Where to write the JSON report (default: report_<stage>.json next to the data).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write pseudo masks in the dataset mask layout under this directory.
    #[arg(long)]
    masks_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only this clip.
    #[arg(long)]
    clip: Option<String>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Checkpoint { .. } => 4,
        Error::Numeric(_) | Error::EmptyDataset(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::ExportPlots(a) => export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs, seed: Option<u64>) -> Result<(), Error> {
    if a.classes == 0 || a.classes > 254 {
        return Err(Error::Usage(format!("--classes must be in 1..=254, got {}", a.classes)));
    }
    if a.clips == 0 {
        return Err(Error::Usage("--clips must be at least 1".into()));
    }
    if a.frames < 2 {
        return Err(Error::Usage("--frames must be at least 2".into()));
    }
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        num_clips: a.clips,
        num_frames: a.frames,
        image_size: a.size,
        num_classes: a.classes,
        max_objects: defaults.max_objects.min(a.classes),
        min_objects: defaults.min_objects.min(a.classes),
        seed: seed.unwrap_or(defaults.seed),
    };
    let data = generate_dataset(&cfg)?;
    let meta = write_dataset(&data, &a.out)?;
    let instances: usize = data.clips.iter().map(|c| c.instance_classes.len()).sum();
    println!(
        "wrote {} clips x {} frames ({} classes, {} px, {} instrument tracks) to {}",
        meta.clips.len(),
        a.frames,
        data.num_classes,
        data.image_size,
        instances,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = read_dataset(&a.data)?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    let mut trainer = Trainer::new(cfg, &data)?;
    println!(
        "training {} steps ({} per epoch) on {} clips",
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        data.clips.len()
    );
    let mut record = trainer.run(|s| {
        log::info!("step {} cls {:.4} overall {:.4}", s.step, s.cls, s.overall);
    })?;
    let ckpt = trainer.checkpoint();
    if let Some(val) = &val {
        for stage in [Stage::CamSeed, Stage::PseudoMask] {
            let report = evaluate_stage(&ckpt, val, stage)?;
            record.snapshots.push(weaksurg::trainer::StageSnapshot {
                epoch: trainer.epoch().saturating_sub(1),
                stage: stage.to_string(),
                ch_iou: report.ch_iou(),
                ap50: report.ap50(),
            });
        }
    }
    let ckpt_path = a.out.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;
    record.write(&a.out)?;
    if let Some(last) = record.epochs.last() {
        if let Some(m) = last.train_map {
            println!("final train classification mAP {:.4}", m);
        }
    }
    for s in &record.snapshots {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"));
        println!("validation {}: Ch_IoU {} AP50 {}", s.stage, fmt(s.ch_iou), fmt(s.ap50));
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let stage: Stage = a.stage.parse()?;
    let data = read_dataset(&a.data)?;
    let report = match &a.ckpt {
        Some(path) if !a.oracle => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(dir) = &a.masks_out {
                let (enc, params) = ckpt.model()?;
                let source = ModelCams {
                    encoder: &enc,
                    params: &params,
                };
                let n = write_pseudo_masks(&source, &data, &ckpt.pseudo_mask, &IdentityRefiner, dir)?;
                println!("wrote {n} pseudo masks under {}", dir.display());
            }
            evaluate_stage(&ckpt, &data, stage)?
        }
        _ => {
            let source = OracleCams {
                num_classes: data.num_classes,
            };
            let cfg = PseudoMaskConfig::default();
            if let Some(dir) = &a.masks_out {
                let n = write_pseudo_masks(&source, &data, &cfg, &IdentityRefiner, dir)?;
                println!("wrote {n} pseudo masks under {}", dir.display());
            }
            evaluate_with(&source, &data, stage, &cfg, &IdentityRefiner)?
        }
    };
    let path = a
        .report
        .unwrap_or_else(|| default_report_path(&a.data, stage));
    report.write_json(&path)?;
    print!("{}", report.summary());
    println!("report written to {}", path.display());
    Ok(())
}

fn default_report_path(data: &Path, stage: Stage) -> PathBuf {
    data.join(format!("report_{stage}.json"))
}

fn export_plots(a: PlotArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let (enc, params) = ckpt.model()?;
    let source = ModelCams {
        encoder: &enc,
        params: &params,
    };
    let clips: Vec<_> = data
        .clips
        .iter()
        .filter(|c| a.clip.as_ref().map_or(true, |id| &c.id == id))
        .collect();
    if clips.is_empty() {
        return Err(Error::Usage(format!("no clip named {:?}", a.clip.unwrap_or_default())));
    }
    let mut written = 0;
    for clip in clips {
        let dir = a.out.join(&clip.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        for f in 0..clip.frames.len() {
            let pred = predict_frame(&source, clip, f, Stage::PseudoMask, &ckpt.pseudo_mask, &IdentityRefiner)?;
            let panel = weaksurg::plots::render_panel(&clip.frames[f], &pred, &clip.presence[f]);
            let path = dir.join(format!("{f:06}.png"));
            panel.save(&path).map_err(|e| Error::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            written += 1;
        }
    }
    println!("wrote {written} panels to {}", a.out.display());
    Ok(())
}
