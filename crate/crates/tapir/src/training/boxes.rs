//! Box-level training: the instrument detector itself (set-matching loss,
//! AdamW) and the action head that classifies each detected box from fused
//! clip + box features. The detector is trained on sparse keyframes and then
//! frozen; action training matches its detections to ground-truth instances
//! once up front and fine-tunes only the video encoder and the head.

use crate::annotation::{BoundingBox, DatasetIndex};
use crate::data::{video_meta, FrameCache};
use crate::detector::loss::{detection_loss, GtBox};
use crate::detector::{decode_detections, detector_forward, Detection, DetectorConfig};
use crate::encoder::{encode, EncoderConfig};
use crate::evaluation::{iou, DetectionPrediction};
use crate::heads::{head_logits, init_head, pool_video_features};
use crate::training::{
    deterministic_shuffle, load_training_checkpoint, save_training_checkpoint, write_metrics_csv,
    EpochRecord, OptimConfig, Optimizer, TrainSummary,
};
use crate::{Result, TapirError};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::path::Path;
use tapir_autograd::params::{add_grads, ParamStore, Session};

/// Detections at or above this confidence feed the action recognizer.
pub const ACTION_CONFIDENCE_THRESHOLD: f64 = 0.75;
/// Minimum overlap for a detection to inherit an instance's action labels.
pub const ACTION_MATCH_IOU: f64 = 0.5;

pub const ACTION_HEAD_FUSED: &str = "action";
pub const ACTION_HEAD_CLIP_ONLY: &str = "action_clip";

/// One detector training frame: every sparse keyframe, including idle ones
/// whose empty ground truth supervises the no-object class.
#[derive(Debug, Clone)]
pub struct BoxSample {
    pub video_id: String,
    pub frame_index: usize,
    pub gt: Vec<GtBox>,
}

pub fn box_samples(index: &DatasetIndex, videos: &[String]) -> Vec<BoxSample> {
    let mut out = Vec::new();
    for v in videos {
        for kf in index.keyframes_of(v) {
            if !kf.has_box_annotations {
                continue;
            }
            let gt = kf
                .instances
                .iter()
                .map(|inst| GtBox {
                    class_id: inst.instrument_id,
                    bbox: inst.bbox.to_center(),
                })
                .collect();
            out.push(BoxSample {
                video_id: kf.video_id.clone(),
                frame_index: kf.frame_index,
                gt,
            });
        }
    }
    out
}

pub struct DetectorRun<'a> {
    pub detector: &'a DetectorConfig,
    pub optim: &'a OptimConfig,
    pub seed: u64,
    pub out_dir: Option<&'a Path>,
    pub config_echo: String,
    pub resume_from: Option<&'a Path>,
}

/// Train the detector on sparse keyframes with the Hungarian set loss.
pub fn train_detector(
    store: &mut ParamStore,
    run: &DetectorRun,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    train_videos: &[String],
) -> Result<TrainSummary> {
    run.detector.validate()?;
    run.detector.init_params(store);

    let samples = box_samples(index, train_videos);
    if samples.is_empty() {
        return Err(TapirError::Validation("no detector training samples".into()));
    }

    let mut opt = Optimizer::new(run.optim);
    let mut start_epoch = 0usize;
    if let Some(ckpt) = run.resume_from {
        let (params, optim_state, epochs_done, _echo) = load_training_checkpoint(ckpt)?;
        *store = params;
        opt.import_state(&optim_state);
        start_epoch = epochs_done;
    }

    let batch = run.optim.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let total_steps = steps_per_epoch * run.optim.epochs;

    let mut records = Vec::new();
    for epoch in start_epoch..run.optim.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        deterministic_shuffle(&mut order, run.seed, &format!("det/shuffle/epoch{epoch}"));

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let lr = run.optim.lr_at(global_step as f64 / total_steps as f64);
            last_lr = lr;

            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            for &si in chunk {
                let s = &samples[si];
                let video = video_meta(index, &s.video_id)?;
                let image = cache.frame(video, s.frame_index)?.clone();
                let mut sess = Session::new(store);
                let fw = detector_forward(&mut sess, run.detector, &image)?;
                let dl = detection_loss(&mut sess, &fw, &s.gt, run.detector.num_classes);
                let value = sess.tape.value(dl.total)[IxDyn(&[])];
                if !value.is_finite() {
                    return Err(TapirError::Numeric(format!(
                        "non-finite detection loss at epoch {epoch} batch {bi} ({}:{})",
                        s.video_id, s.frame_index
                    )));
                }
                epoch_loss += value;
                add_grads(&mut grads, &sess.grads(dl.total));
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * inv);
            }
            opt.step(store, &grads, lr);
        }

        records.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / samples.len() as f64,
            lr: last_lr,
        });
        if let Some(dir) = run.out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| TapirError::io(dir.display().to_string(), e))?;
            save_training_checkpoint(
                store,
                &opt.export_state(),
                epoch + 1,
                &dir.join(format!("epoch_{epoch:03}.ckpt")),
                &run.config_echo,
            )?;
            write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TapirError::io(dir.display().to_string(), e))?;
        let path = dir.join("final.ckpt");
        save_training_checkpoint(
            store,
            &opt.export_state(),
            run.optim.epochs,
            &path,
            &run.config_echo,
        )?;
        write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainSummary { records, final_checkpoint })
}

/// Run the frozen detector over every sparse keyframe of `videos`.
pub fn detect_keyframes(
    store: &ParamStore,
    config: &DetectorConfig,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    videos: &[String],
    threshold: f64,
) -> Result<BTreeMap<(String, usize), Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for v in videos {
        let video = video_meta(index, v)?;
        for kf in index.keyframes_of(v) {
            if !kf.has_box_annotations {
                continue;
            }
            let image = cache.frame(video, kf.frame_index)?.clone();
            let mut sess = Session::new(store);
            let fw = detector_forward(&mut sess, config, &image)?;
            let dets = decode_detections(&sess, &fw, config, threshold);
            out.insert((v.clone(), kf.frame_index), dets);
        }
    }
    Ok(out)
}

/// Instrument-recognition predictions: every query of every sparse keyframe
/// is ranked, carrying its full class-probability row.
pub fn instrument_detections(
    store: &ParamStore,
    config: &DetectorConfig,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    videos: &[String],
) -> Result<Vec<DetectionPrediction>> {
    let by_frame = detect_keyframes(store, config, index, cache, videos, 0.0)?;
    let mut out = Vec::new();
    for ((video_id, frame_index), dets) in by_frame {
        for d in dets {
            out.push(DetectionPrediction {
                video_id: video_id.clone(),
                frame_index,
                bbox: d.bbox,
                scores: d.class_probs,
            });
        }
    }
    Ok(out)
}

/// Greedy IoU-descending one-to-one matching; pairs below `min_iou` are
/// dropped. Returns (detection index, ground-truth index) pairs sorted by
/// detection index.
pub fn greedy_match(dets: &[Detection], gts: &[BoundingBox], min_iou: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(&d.bbox, g);
            if v >= min_iou {
                cands.push((v, di, gi));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_d = vec![false; dets.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, di, gi) in cands {
        if used_d[di] || used_g[gi] {
            continue;
        }
        used_d[di] = true;
        used_g[gi] = true;
        out.push((di, gi));
    }
    out.sort_unstable();
    out
}

/// One action training frame: detector features of matched boxes plus their
/// inherited multi-hot action targets.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub video_id: String,
    pub frame_index: usize,
    pub det_features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Match frozen-detector outputs to annotated instances and collect training
/// material. Frames with no surviving match are skipped.
pub fn action_samples(
    detector_store: &ParamStore,
    detector: &DetectorConfig,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    videos: &[String],
    match_iou: f64,
) -> Result<Vec<ActionSample>> {
    let n_actions = index.taxonomy.actions.len();
    let by_frame = detect_keyframes(detector_store, detector, index, cache, videos, 0.0)?;
    let mut out = Vec::new();
    for ((video_id, frame_index), dets) in by_frame {
        let kf = index
            .keyframes
            .iter()
            .find(|k| k.video_id == video_id && k.frame_index == frame_index)
            .expect("detections come from indexed keyframes");
        if kf.instances.is_empty() {
            continue;
        }
        let gt_boxes: Vec<BoundingBox> = kf.instances.iter().map(|i| i.bbox.clone()).collect();
        let pairs = greedy_match(&dets, &gt_boxes, match_iou);
        if pairs.is_empty() {
            continue;
        }
        let mut det_features = Vec::new();
        let mut targets = Vec::new();
        for (di, gi) in pairs {
            det_features.push(dets[di].feature.clone());
            let mut hot = vec![0.0; n_actions];
            for &a in &kf.instances[gi].action_ids {
                hot[a] = 1.0;
            }
            targets.push(hot);
        }
        out.push(ActionSample { video_id, frame_index, det_features, targets });
    }
    Ok(out)
}

pub struct ActionRun<'a> {
    pub encoder: &'a EncoderConfig,
    pub detector: &'a DetectorConfig,
    pub optim: &'a OptimConfig,
    pub clip_stride: usize,
    pub seed: u64,
    /// Fused head (clip descriptor + box feature) vs clip-only ablation.
    pub fused: bool,
    pub match_iou: f64,
    pub out_dir: Option<&'a Path>,
    pub config_echo: String,
}

fn action_head_name(fused: bool) -> &'static str {
    if fused {
        ACTION_HEAD_FUSED
    } else {
        ACTION_HEAD_CLIP_ONLY
    }
}

/// Logits for `k` boxes of one frame: the pooled clip descriptor is tiled to
/// one row per box and, for the fused head, concatenated with each box's
/// detector feature.
fn frame_action_logits(
    sess: &mut Session,
    pooled: tapir_autograd::Var,
    det_features: &[Vec<f64>],
    fused: bool,
) -> tapir_autograd::Var {
    let k = det_features.len();
    let ones = sess.constant(ArrayD::from_elem(IxDyn(&[k, 1]), 1.0));
    let tiled = sess.tape.matmul(ones, pooled);
    let feats = if fused {
        let d = det_features[0].len();
        let flat: Vec<f64> = det_features.iter().flatten().copied().collect();
        let mat = sess.constant(
            ArrayD::from_shape_vec(IxDyn(&[k, d]), flat).expect("feature matrix"),
        );
        sess.tape.concat(&[tiled, mat], 1)
    } else {
        tiled
    };
    head_logits(sess, feats, action_head_name(fused))
}

/// Fine-tune the encoder and train an action head on frozen-detector boxes.
pub fn train_action_head(
    store: &mut ParamStore,
    detector_store: &ParamStore,
    run: &ActionRun,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    train_videos: &[String],
) -> Result<TrainSummary> {
    run.encoder.validate()?;
    run.encoder.init_params(store);
    let n_actions = index.taxonomy.actions.len();
    let in_dim = if run.fused {
        run.encoder.final_channels() + run.detector.channels
    } else {
        run.encoder.final_channels()
    };
    init_head(store, action_head_name(run.fused), in_dim, n_actions);

    let samples = action_samples(
        detector_store,
        run.detector,
        index,
        cache,
        train_videos,
        run.match_iou,
    )?;
    if samples.is_empty() {
        return Err(TapirError::Validation(
            "no action training samples (no detection matched an instance)".into(),
        ));
    }

    let mut opt = Optimizer::new(run.optim);
    let batch = run.optim.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let total_steps = steps_per_epoch * run.optim.epochs;

    let mut records = Vec::new();
    for epoch in 0..run.optim.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        deterministic_shuffle(&mut order, run.seed, &format!("action/shuffle/epoch{epoch}"));

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let lr = run.optim.lr_at(global_step as f64 / total_steps as f64);
            last_lr = lr;

            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            for &si in chunk {
                let s = &samples[si];
                let video = video_meta(index, &s.video_id)?;
                let clip = cache.clip(video, s.frame_index, run.encoder.clip_t, run.clip_stride)?;
                let mut sess = Session::new(store);
                let enc = encode(&mut sess, &clip, run.encoder, None)?;
                let pooled = pool_video_features(&mut sess, enc.final_grid);
                let logits = frame_action_logits(&mut sess, pooled, &s.det_features, run.fused);
                let k = s.targets.len();
                let flat: Vec<f64> = s.targets.iter().flatten().copied().collect();
                let targets =
                    ArrayD::from_shape_vec(IxDyn(&[k, n_actions]), flat).expect("target matrix");
                let elem = sess.tape.bce_with_logits(logits, &targets);
                let loss = sess.tape.mean_all(elem);
                let value = sess.tape.value(loss)[IxDyn(&[])];
                if !value.is_finite() {
                    return Err(TapirError::Numeric(format!(
                        "non-finite action loss at epoch {epoch} batch {bi} ({}:{})",
                        s.video_id, s.frame_index
                    )));
                }
                epoch_loss += value;
                add_grads(&mut grads, &sess.grads(loss));
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * inv);
            }
            opt.step(store, &grads, lr);
        }

        records.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / samples.len() as f64,
            lr: last_lr,
        });
        if let Some(dir) = run.out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| TapirError::io(dir.display().to_string(), e))?;
            write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TapirError::io(dir.display().to_string(), e))?;
        let path = dir.join("final.ckpt");
        save_training_checkpoint(store, &opt.export_state(), run.optim.epochs, &path, &run.config_echo)?;
        write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainSummary { records, final_checkpoint })
}

/// Action predictions for evaluation: confident detections only, each scored
/// with independent per-action probabilities.
#[allow(clippy::too_many_arguments)]
pub fn action_detections(
    store: &ParamStore,
    detector_store: &ParamStore,
    encoder: &EncoderConfig,
    detector: &DetectorConfig,
    fused: bool,
    clip_stride: usize,
    confidence: f64,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    videos: &[String],
) -> Result<Vec<DetectionPrediction>> {
    let by_frame = detect_keyframes(detector_store, detector, index, cache, videos, confidence)?;
    let mut out = Vec::new();
    for ((video_id, frame_index), dets) in by_frame {
        if dets.is_empty() {
            continue;
        }
        let video = video_meta(index, &video_id)?;
        let clip = cache.clip(video, frame_index, encoder.clip_t, clip_stride)?;
        let mut sess = Session::new(store);
        let enc = encode(&mut sess, &clip, encoder, None)?;
        let pooled = pool_video_features(&mut sess, enc.final_grid);
        let feats: Vec<Vec<f64>> = dets.iter().map(|d| d.feature.clone()).collect();
        let logits = frame_action_logits(&mut sess, pooled, &feats, fused);
        let probs = sess.tape.sigmoid(logits);
        let pv = sess.tape.value(probs);
        for (i, d) in dets.into_iter().enumerate() {
            out.push(DetectionPrediction {
                video_id: video_id.clone(),
                frame_index,
                bbox: d.bbox,
                scores: (0..pv.shape()[1]).map(|j| pv[[i, j]]).collect(),
            });
        }
    }
    Ok(out)
}
