//! Scratch harness for sizing the end-to-end acceptance experiments.
//! Not part of the library; run with `cargo run --release --example acc_probe -- <cmd>`.

use std::path::Path;
use std::time::Instant;

use tapir::annotation::default_folds;
use tapir::data::FrameCache;
use tapir::detector::DetectorConfig;
use tapir::encoder::{EncoderConfig, StageConfig};
use tapir::evaluation::{detection_map, DetectionMode, FrameTask};
use tapir::synthetic::{render_dataset, GeneratorConfig, RenderedDataset};
use tapir::training::boxes::{
    action_detections, instrument_detections, train_action_head, train_detector, ActionRun,
    DetectorRun, ACTION_CONFIDENCE_THRESHOLD, ACTION_MATCH_IOU,
};
use tapir::training::cv::sparse_gt;
use tapir::training::schedule::{OptimConfig, OptimKind};
use tapir::training::{
    frame_task_accuracy, frame_task_scores, train_frame_task, transfer_encoder, FrameTaskRun,
};
use tapir_autograd::params::ParamStore;

fn probe_encoder() -> EncoderConfig {
    EncoderConfig {
        patch: (2, 8, 8),
        c0: 16,
        clip_t: 4,
        image_size: (64, 64),
        stages: vec![
            StageConfig {
                blocks: 1,
                heads: 2,
                q_stride: (1, 1, 1),
                kv_stride: (1, 2, 2),
                channel_mult: 1,
            },
            StageConfig {
                blocks: 1,
                heads: 2,
                q_stride: (1, 2, 2),
                kv_stride: (1, 1, 1),
                channel_mult: 2,
            },
        ],
        mlp_ratio: 2,
        dropout: 0.0,
    }
}

fn probe_detector() -> DetectorConfig {
    let env = |k: &str, d: usize| -> usize {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    DetectorConfig {
        channels: env("PROBE_DET_C", 32),
        heads: 2,
        points: 4,
        enc_layers: env("PROBE_DET_ENC", 1),
        dec_layers: env("PROBE_DET_DEC", 2),
        num_queries: env("PROBE_DET_Q", 8),
        ffn_hidden: env("PROBE_DET_FFN", 64),
        num_classes: 7,
        image_size: (64, 64),
    }
}

fn c6_dataset(root: &Path, seed: u64) -> RenderedDataset {
    let frames = std::env::var("PROBE_FRAMES").ok().and_then(|v| v.parse().ok()).unwrap_or(48);
    let sparse = std::env::var("PROBE_SPARSE").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let config = GeneratorConfig {
        n_videos: 8,
        frames_per_video: frames,
        fps: 2,
        keyframe_stride_dense: 4,
        keyframe_stride_sparse: sparse,
        seed,
        ..GeneratorConfig::default()
    };
    render_dataset(&config, root).unwrap()
}

fn dataset_stats(ds: &RenderedDataset) {
    let folds = default_folds(&ds.index).unwrap();
    for (f, vids) in folds.folds.iter().enumerate() {
        let gt = sparse_gt(&ds.index, vids);
        let boxes: usize = gt.iter().map(|k| k.instances.len()).sum();
        let multi = gt.iter().filter(|k| k.instances.len() >= 2).count();
        let mut phase_set = std::collections::BTreeSet::new();
        let mut step_set = std::collections::BTreeSet::new();
        for v in vids {
            for kf in ds.index.keyframes_of(v) {
                phase_set.insert(kf.phase_id);
                step_set.insert(kf.step_id);
            }
        }
        println!(
            "  fold{f}: videos={vids:?} sparse_kf={} boxes={boxes} multi_frames={multi} phases={} steps={}",
            gt.len(),
            phase_set.len(),
            step_set.len()
        );
    }
}

fn cmd_c6(seed: u64, epochs: usize, det_lr: f64, det_epochs: usize, frame_lr: f64, frame_batch: usize, det_batch: usize) {
    let dir = std::env::temp_dir().join(format!("acc_probe_c6_{seed}"));
    let ds = c6_dataset(&dir, seed);
    println!("dataset at {}", dir.display());
    dataset_stats(&ds);
    let folds = default_folds(&ds.index).unwrap();
    let train_videos = folds.folds[1].clone();
    let mut cache = FrameCache::new(&dir);
    let encoder = probe_encoder();

    for (task, floor) in [(FrameTask::Phase, 0.95), (FrameTask::Step, 0.90)] {
        let t0 = Instant::now();
        let kind = if std::env::var("PROBE_ADAMW").is_ok() { OptimKind::AdamW } else { OptimKind::Sgd };
        let optim = OptimConfig {
            kind,
            epochs,
            base_lr: frame_lr,
            batch_size: frame_batch,
            momentum: std::env::var("PROBE_MOMENTUM").ok().and_then(|v| v.parse().ok()).unwrap_or(0.9),
            ..OptimConfig::default()
        };
        let mut store = ParamStore::new(101);
        let run = FrameTaskRun {
            encoder: &encoder,
            task,
            optim: &optim,
            clip_stride: 1,
            seed: 101,
            out_dir: None,
            config_echo: String::new(),
            resume_from: None,
        };
        let summary = train_frame_task(&mut store, &run, &ds.index, &mut cache, &train_videos).unwrap();
        let preds = frame_task_scores(&store, &encoder, task, &ds.index, &mut cache, &train_videos, 1).unwrap();
        let acc = frame_task_accuracy(&preds, &ds.index, task);
        println!(
            "{task:?}: train_acc={acc:.4} (floor {floor}) last_loss={:.4} elapsed={:.1}s",
            summary.records.last().unwrap().mean_loss,
            t0.elapsed().as_secs_f64()
        );
    }

    let t0 = Instant::now();
    let det = probe_detector();
    let optim = OptimConfig {
        base_lr: det_lr,
        epochs: det_epochs,
        batch_size: det_batch,
        warmup_epochs: std::env::var("PROBE_DET_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(5),
        ..OptimConfig::detector_default()
    };
    let mut store = ParamStore::new(202);
    let run = DetectorRun {
        detector: &det,
        optim: &optim,
        seed: 202,
        out_dir: None,
        config_echo: String::new(),
        resume_from: None,
    };
    let summary = train_detector(&mut store, &run, &ds.index, &mut cache, &train_videos).unwrap();
    let preds = instrument_detections(&store, &det, &ds.index, &mut cache, &train_videos).unwrap();
    let gt = sparse_gt(&ds.index, &train_videos);
    let report = detection_map(&preds, &gt, 7, 0.5, DetectionMode::Instrument);
    println!(
        "detector: train_mAP@0.5={:.4} (floor 0.90) last_loss={:.4} elapsed={:.1}s per_class={:?}",
        report.mean_ap,
        summary.records.last().unwrap().mean_loss,
        t0.elapsed().as_secs_f64(),
        report.per_class_ap
    );
}

fn c78_dataset(root: &Path, seed: u64) -> RenderedDataset {
    let frames = std::env::var("PROBE_FRAMES").ok().and_then(|v| v.parse().ok()).unwrap_or(96);
    let videos = std::env::var("PROBE_VIDEOS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let config = GeneratorConfig {
        n_videos: videos,
        frames_per_video: frames,
        fps: 2,
        keyframe_stride_dense: 4,
        keyframe_stride_sparse: 4,
        seed,
        ..GeneratorConfig::default()
    };
    render_dataset(&config, root).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn action_map_for(
    ds: &RenderedDataset,
    cache: &mut FrameCache,
    encoder: &EncoderConfig,
    det: &DetectorConfig,
    det_store: &ParamStore,
    train_videos: &[String],
    eval_videos: &[String],
    seed: u64,
    fused: bool,
    pretrained: Option<&ParamStore>,
    epochs: usize,
) -> f64 {
    let optim = OptimConfig {
        kind: OptimKind::AdamW,
        base_lr: std::env::var("PROBE_ACTION_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3),
        epochs,
        warmup_epochs: 2,
        batch_size: 2,
        ..OptimConfig::default()
    };
    let mut store = match pretrained {
        Some(p) => transfer_encoder(p, seed),
        None => ParamStore::new(seed),
    };
    let run = ActionRun {
        encoder,
        detector: det,
        optim: &optim,
        clip_stride: 1,
        seed,
        fused,
        match_iou: ACTION_MATCH_IOU,
        out_dir: None,
        config_echo: String::new(),
    };
    train_action_head(&mut store, det_store, &run, &ds.index, cache, train_videos).unwrap();
    let conf = std::env::var("PROBE_CONF")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(ACTION_CONFIDENCE_THRESHOLD);
    let preds = action_detections(
        &store,
        det_store,
        encoder,
        det,
        fused,
        1,
        conf,
        &ds.index,
        cache,
        eval_videos,
    )
    .unwrap();
    let gt = sparse_gt(&ds.index, eval_videos);
    let n_actions = ds.index.taxonomy.actions.len();
    detection_map(&preds, &gt, n_actions, 0.5, DetectionMode::Action).mean_ap
}

fn cmd_c78(data_seed: u64, det_lr: f64, det_epochs: usize, action_epochs: usize, pre_epochs: usize) {
    let dir = std::env::temp_dir().join(format!("acc_probe_c78_{data_seed}"));
    let ds = c78_dataset(&dir, data_seed);
    dataset_stats(&ds);
    let folds = default_folds(&ds.index).unwrap();
    let train_videos = folds.folds[1].clone();
    let eval_videos = folds.folds[0].clone();
    let mut cache = FrameCache::new(&dir);
    let encoder = probe_encoder();
    let det = probe_detector();

    let t0 = Instant::now();
    let det_optim = OptimConfig {
        base_lr: det_lr,
        epochs: det_epochs,
        warmup_epochs: 1,
        batch_size: 2,
        ..OptimConfig::detector_default()
    };
    let mut det_store = ParamStore::new(7);
    let run = DetectorRun {
        detector: &det,
        optim: &det_optim,
        seed: 7,
        out_dir: None,
        config_echo: String::new(),
        resume_from: None,
    };
    train_detector(&mut det_store, &run, &ds.index, &mut cache, &train_videos).unwrap();
    // Sanity: held-out instrument mAP tells us whether detections cover the eval fold.
    let inst = instrument_detections(&det_store, &det, &ds.index, &mut cache, &eval_videos).unwrap();
    let inst_map = detection_map(&inst, &sparse_gt(&ds.index, &eval_videos), 7, 0.5, DetectionMode::Instrument).mean_ap;
    println!("detector: heldout instrument mAP={inst_map:.4} elapsed={:.1}s", t0.elapsed().as_secs_f64());

    let mut gaps = Vec::new();
    let mut transfer_deltas = Vec::new();
    for seed in [11u64, 12, 13] {
        let t1 = Instant::now();
        let fused = action_map_for(&ds, &mut cache, &encoder, &det, &det_store, &train_videos, &eval_videos, seed, true, None, action_epochs);
        let ablation = action_map_for(&ds, &mut cache, &encoder, &det, &det_store, &train_videos, &eval_videos, seed, false, None, action_epochs);

        // Step pretraining for the transfer arm; sweep "epochs@lr" variants.
        let sweep = std::env::var("PROBE_PRE_SWEEP").unwrap_or_else(|_| format!("{pre_epochs}@1e-3"));
        let mut first_delta = None;
        for spec in sweep.split(',') {
            let (ep_s, lr_s) = spec.split_once('@').unwrap();
            let pre_ep: usize = ep_s.parse().unwrap();
            let pre_lr: f64 = lr_s.parse().unwrap();
            let pre_optim = OptimConfig {
                kind: OptimKind::AdamW,
                base_lr: pre_lr,
                epochs: pre_ep,
                warmup_epochs: 2.min(pre_ep),
                batch_size: 1,
                ..OptimConfig::default()
            };
            let mut pre_store = ParamStore::new(seed ^ 0x5151);
            let pre_run = FrameTaskRun {
                encoder: &encoder,
                task: FrameTask::Step,
                optim: &pre_optim,
                clip_stride: 1,
                seed: seed ^ 0x5151,
                out_dir: None,
                config_echo: String::new(),
                resume_from: None,
            };
            train_frame_task(&mut pre_store, &pre_run, &ds.index, &mut cache, &train_videos).unwrap();
            let pre_preds = frame_task_scores(&pre_store, &encoder, FrameTask::Step, &ds.index, &mut cache, &train_videos, 1).unwrap();
            let pre_acc = frame_task_accuracy(&pre_preds, &ds.index, FrameTask::Step);
            let pretrained = action_map_for(&ds, &mut cache, &encoder, &det, &det_store, &train_videos, &eval_videos, seed, true, Some(&pre_store), action_epochs);
            println!(
                "  seed {seed} pre {spec}: step_acc={pre_acc:.3} pretrained={pretrained:.4} delta={:+.2}pts",
                (pretrained - fused) * 100.0
            );
            if first_delta.is_none() {
                first_delta = Some((pretrained - fused) * 100.0);
            }
        }

        println!(
            "seed {seed}: fused={fused:.4} ablation={ablation:.4} gap={:.2}pts elapsed={:.0}s",
            (fused - ablation) * 100.0,
            t1.elapsed().as_secs_f64()
        );
        gaps.push((fused - ablation) * 100.0);
        transfer_deltas.push(first_delta.unwrap());
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    transfer_deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "median gap = {:.2} pts (need >= 10)   median transfer delta = {:.2} pts (need >= -1)",
        gaps[1], transfer_deltas[1]
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cmd = args.get(1).map(String::as_str).unwrap_or("");
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    match cmd {
        "c6" => cmd_c6(
            num(2, 800.0) as u64,
            num(3, 30.0) as usize,
            num(4, 1e-3),
            num(5, 30.0) as usize,
            num(6, 0.0125),
            num(7, 4.0) as usize,
            num(8, 4.0) as usize,
        ),
        "c78" => cmd_c78(num(2, 900.0) as u64, num(3, 1e-3), num(4, 20.0) as usize, num(5, 12.0) as usize, num(6, 10.0) as usize),
        other => eprintln!("unknown command {other:?} (want c6|c78)"),
    }
}
