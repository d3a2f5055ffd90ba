//! Command-line front end: generate datasets, train and evaluate individual
//! tasks, validate annotation files, or reproduce a whole experiment.
//!
//! Exit codes: 0 success, 1 usage or internal error, 2 validation failure,
//! 3 numeric failure during training.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use tapir::annotation::{default_folds, validate_dataset, DatasetIndex};
use tapir::config::ExperimentConfig;
use tapir::data::FrameCache;
use tapir::evaluation::{detection_map, frame_map, DetectionMode, EvalReport, FrameTask};
use tapir::report::run_experiment;
use tapir::training::boxes::{
    action_detections, instrument_detections, train_action_head, train_detector, ActionRun,
    DetectorRun,
};
use tapir::training::cv::{
    dense_gt, fold_seed, sparse_gt, TaskKind, DETECTION_IOU_THRESHOLD,
};
use tapir::training::{
    frame_task_scores, load_training_checkpoint, train_frame_task, FrameTaskRun,
};
use tapir::{synthetic, Result, TapirError};
use tapir_autograd::params::ParamStore;

#[derive(Parser)]
#[command(
    name = "tapir",
    version,
    about = "Multi-task surgical-video pipeline: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a ready-to-edit experiment configuration.
    InitConfig {
        /// "smoke" (minutes) or "full" (reference shapes).
        #[arg(long, default_value = "smoke")]
        preset: String,
        /// Directory the config's dataset/output paths point into.
        #[arg(long)]
        workdir: PathBuf,
        /// Where to write the JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic dataset named by a config (no-op if present).
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check an annotation file against every schema rule.
    Validate {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Train one task with one eval fold held out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// phases | steps | instruments | actions
        #[arg(long)]
        task: String,
        /// Held-out fold index (0 or 1); training uses the other fold.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a previously trained task on its held-out fold.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run the entire two-fold protocol and write final_report.json.
    ReproduceAll {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_thread_cap();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        let code = match e {
            TapirError::Validation(_) | TapirError::Parse { .. } => 2,
            TapirError::Numeric(_) => 3,
            _ => 1,
        };
        std::process::exit(code);
    }
}

/// Honor TAPIR_BENCH_THREADS for reproducible timing on shared machines.
fn init_thread_cap() {
    if let Ok(v) = std::env::var("TAPIR_BENCH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn parse_task(s: &str) -> Result<TaskKind> {
    TaskKind::ALL
        .iter()
        .copied()
        .find(|t| t.name() == s)
        .ok_or_else(|| {
            TapirError::Validation(format!(
                "unknown task {s:?}; expected one of phases, steps, instruments, actions"
            ))
        })
}

fn parse_fold(fold: usize) -> Result<usize> {
    if fold < 2 {
        Ok(fold)
    } else {
        Err(TapirError::Validation(format!("fold must be 0 or 1, got {fold}")))
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitConfig { preset, workdir, out } => {
            let config = match preset.as_str() {
                "smoke" => ExperimentConfig::smoke(&workdir),
                "full" => ExperimentConfig::full(&workdir),
                other => {
                    return Err(TapirError::Validation(format!(
                        "unknown preset {other:?}; expected smoke or full"
                    )))
                }
            };
            config.save(&out)?;
            println!("wrote {} ({preset} preset)", out.display());
            Ok(())
        }
        Command::Generate { config } => {
            let config = ExperimentConfig::load(&config)?;
            config.validate()?;
            let ds = synthetic::render_dataset(&config.generator, &config.dataset_root)?;
            println!(
                "dataset at {}: {} videos, {} keyframes, checksum {}",
                ds.root.display(),
                ds.index.videos.len(),
                ds.index.keyframes.len(),
                ds.manifest.annotations_checksum
            );
            Ok(())
        }
        Command::Validate { annotations } => {
            let index = DatasetIndex::load(&annotations)?;
            let report = validate_dataset(&index);
            if report.is_valid() {
                println!(
                    "{}: valid ({} videos, {} keyframes)",
                    annotations.display(),
                    index.videos.len(),
                    index.keyframes.len()
                );
                Ok(())
            } else {
                for v in &report.violations {
                    let frame = v
                        .frame_index
                        .map(|f| format!(" frame {f}"))
                        .unwrap_or_default();
                    println!("[{}]{} {}: {}", v.video_id, frame, v.rule, v.detail);
                }
                Err(TapirError::Validation(format!(
                    "{} violation(s) in {}",
                    report.violations.len(),
                    annotations.display()
                )))
            }
        }
        Command::Train { config, task, fold } => {
            let config = ExperimentConfig::load(&config)?;
            config.validate()?;
            let task = parse_task(&task)?;
            let fold = parse_fold(fold)?;
            train_one(&config, task, fold)
        }
        Command::Eval { config, task, fold } => {
            let config = ExperimentConfig::load(&config)?;
            config.validate()?;
            let task = parse_task(&task)?;
            let fold = parse_fold(fold)?;
            let report = eval_one(&config, task, fold)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
            let out = config
                .output_root
                .join(format!("eval_{}_fold{fold}.json", task.name()));
            std::fs::create_dir_all(&config.output_root)
                .map_err(|e| TapirError::io(config.output_root.display().to_string(), e))?;
            std::fs::write(&out, format!("{text}\n"))
                .map_err(|e| TapirError::io(out.display().to_string(), e))?;
            Ok(())
        }
        Command::ReproduceAll { config } => {
            let config = ExperimentConfig::load(&config)?;
            let report = run_experiment(&config)?;
            print!("{}", report.to_text_table());
            println!(
                "report written to {}",
                config.output_root.join("final_report.json").display()
            );
            Ok(())
        }
    }
}

/// Run directory used by both `train` and `eval`; matches the layout the
/// full protocol writes.
fn run_dir(config: &ExperimentConfig, name: &str, fold: usize) -> PathBuf {
    config.output_root.join(format!("runs/fold{fold}/{name}"))
}

fn load_params(path: &Path) -> Result<ParamStore> {
    let (params, _optim, _epochs, _echo) = load_training_checkpoint(path)?;
    Ok(params)
}

fn open_dataset(config: &ExperimentConfig) -> Result<(DatasetIndex, FrameCache)> {
    let ds = synthetic::render_dataset(&config.generator, &config.dataset_root)?;
    let cache = FrameCache::new(&config.dataset_root);
    Ok((ds.index, cache))
}

/// Train the detector for a fold unless its checkpoint already exists;
/// return its parameters either way.
fn detector_for_fold(
    config: &ExperimentConfig,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    train_videos: &[String],
    fold: usize,
) -> Result<ParamStore> {
    let dir = run_dir(config, "detector", fold);
    let ckpt = dir.join("final.ckpt");
    if ckpt.exists() {
        return load_params(&ckpt);
    }
    let mut store = ParamStore::new(fold_seed(config.seed, fold));
    let run = DetectorRun {
        detector: &config.detector,
        optim: &config.detector_optim,
        seed: fold_seed(config.seed, fold),
        out_dir: Some(&dir),
        config_echo: format!("detector fold{fold}"),
        resume_from: None,
    };
    train_detector(&mut store, &run, index, cache, train_videos)?;
    Ok(store)
}

fn train_one(config: &ExperimentConfig, task: TaskKind, fold: usize) -> Result<()> {
    let (index, mut cache) = open_dataset(config)?;
    let folds = default_folds(&index)?;
    let train_videos = folds.folds[1 - fold].clone();
    let seed = fold_seed(config.seed, fold);
    let dir = run_dir(config, task.name(), fold);

    match task {
        TaskKind::Phases | TaskKind::Steps => {
            let frame_task = if task == TaskKind::Phases {
                FrameTask::Phase
            } else {
                FrameTask::Step
            };
            let mut store = ParamStore::new(seed);
            let run = FrameTaskRun {
                encoder: &config.encoder,
                task: frame_task,
                optim: &config.frame_optim,
                clip_stride: config.clip_stride,
                seed,
                out_dir: Some(&dir),
                config_echo: format!("{} fold{fold}", task.name()),
                resume_from: None,
            };
            let summary = train_frame_task(&mut store, &run, &index, &mut cache, &train_videos)?;
            let last = summary.records.last().expect("at least one epoch");
            println!(
                "{} fold{fold}: {} epochs, final mean loss {:.6}",
                task.name(),
                summary.records.len(),
                last.mean_loss
            );
        }
        TaskKind::Instruments => {
            detector_for_fold(config, &index, &mut cache, &train_videos, fold)?;
            println!("detector fold{fold}: trained (used by instruments and actions)");
        }
        TaskKind::Actions => {
            let det_store = detector_for_fold(config, &index, &mut cache, &train_videos, fold)?;
            let mut store = ParamStore::new(seed);
            let run = ActionRun {
                encoder: &config.encoder,
                detector: &config.detector,
                optim: &config.action_optim,
                clip_stride: config.clip_stride,
                seed,
                fused: true,
                match_iou: config.action_match_iou,
                out_dir: Some(&dir),
                config_echo: format!("actions fold{fold}"),
            };
            let summary =
                train_action_head(&mut store, &det_store, &run, &index, &mut cache, &train_videos)?;
            let last = summary.records.last().expect("at least one epoch");
            println!(
                "actions fold{fold}: {} epochs, final mean loss {:.6}",
                summary.records.len(),
                last.mean_loss
            );
        }
    }
    Ok(())
}

fn eval_one(config: &ExperimentConfig, task: TaskKind, fold: usize) -> Result<EvalReport> {
    let (index, mut cache) = open_dataset(config)?;
    let folds = default_folds(&index)?;
    let eval_videos = folds.folds[fold].clone();

    let missing = |name: &str| {
        TapirError::Validation(format!(
            "no checkpoint for {name} fold{fold}; run `tapir train` first"
        ))
    };

    let mut report = match task {
        TaskKind::Phases | TaskKind::Steps => {
            let frame_task = if task == TaskKind::Phases {
                FrameTask::Phase
            } else {
                FrameTask::Step
            };
            let ckpt = run_dir(config, task.name(), fold).join("final.ckpt");
            if !ckpt.exists() {
                return Err(missing(task.name()));
            }
            let store = load_params(&ckpt)?;
            let preds = frame_task_scores(
                &store,
                &config.encoder,
                frame_task,
                &index,
                &mut cache,
                &eval_videos,
                config.clip_stride,
            )?;
            let gt = dense_gt(&index, &eval_videos);
            let n_classes = match frame_task {
                FrameTask::Phase => index.taxonomy.phases.len(),
                FrameTask::Step => index.taxonomy.steps.len(),
            };
            frame_map(&preds, &gt, n_classes, frame_task)?
        }
        TaskKind::Instruments => {
            let ckpt = run_dir(config, "detector", fold).join("final.ckpt");
            if !ckpt.exists() {
                return Err(missing("detector"));
            }
            let store = load_params(&ckpt)?;
            let preds =
                instrument_detections(&store, &config.detector, &index, &mut cache, &eval_videos)?;
            let gt = sparse_gt(&index, &eval_videos);
            detection_map(
                &preds,
                &gt,
                index.taxonomy.instruments.len(),
                DETECTION_IOU_THRESHOLD,
                DetectionMode::Instrument,
            )
        }
        TaskKind::Actions => {
            let det_ckpt = run_dir(config, "detector", fold).join("final.ckpt");
            let act_ckpt = run_dir(config, "actions", fold).join("final.ckpt");
            if !det_ckpt.exists() {
                return Err(missing("detector"));
            }
            if !act_ckpt.exists() {
                return Err(missing("actions"));
            }
            let det_store = load_params(&det_ckpt)?;
            let store = load_params(&act_ckpt)?;
            let preds = action_detections(
                &store,
                &det_store,
                &config.encoder,
                &config.detector,
                true,
                config.clip_stride,
                config.action_confidence,
                &index,
                &mut cache,
                &eval_videos,
            )?;
            let gt = sparse_gt(&index, &eval_videos);
            detection_map(
                &preds,
                &gt,
                index.taxonomy.actions.len(),
                DETECTION_IOU_THRESHOLD,
                DetectionMode::Action,
            )
        }
    };
    report.fold = Some(fold);
    Ok(report)
}
