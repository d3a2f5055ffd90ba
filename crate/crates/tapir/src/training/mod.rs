//! Training engines. Frame-level tasks (phase, step) follow the shared
//! recipe: linear warmup into half-cosine decay with ordered gradient
//! accumulation over fixed-size batches so runs are reproducible bit for
//! bit. The update rule is selectable per run (momentum SGD by default,
//! AdamW for the detector and from-scratch overfitting experiments).
//! Detector and box-head training live in `boxes`.

pub mod boxes;
pub mod cv;
pub mod schedule;

pub use schedule::{OptimConfig, OptimKind};

use crate::annotation::{DatasetIndex, KeyframeAnnotation};
use crate::data::{video_meta, FrameCache};
use crate::encoder::{encode, EncoderConfig};
use crate::evaluation::{FramePrediction, FrameTask};
use crate::heads::{head_logits, init_head};
use crate::{Result, TapirError};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use tapir_autograd::params::{add_grads, rng_for, AdamW, ParamStore, Session, Sgd};

/// Update rule chosen by `OptimConfig::kind`, behind one interface so the
/// training loops stay optimizer-agnostic (including checkpointed state).
pub enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn new(config: &OptimConfig) -> Self {
        match config.kind {
            OptimKind::Sgd => Self::Sgd(Sgd::new(config.momentum, config.weight_decay)),
            OptimKind::AdamW => Self::AdamW(AdamW::new(config.weight_decay)),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ndarray::ArrayD<f64>>,
        lr: f64,
    ) {
        match self {
            Self::Sgd(o) => o.step(store, grads, lr),
            Self::AdamW(o) => o.step(store, grads, lr),
        }
    }

    pub fn export_state(&self) -> BTreeMap<String, ndarray::ArrayD<f64>> {
        match self {
            Self::Sgd(o) => o.export_state(),
            Self::AdamW(o) => o.export_state(),
        }
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, ndarray::ArrayD<f64>>) {
        match self {
            Self::Sgd(o) => o.import_state(state),
            Self::AdamW(o) => o.import_state(state),
        }
    }
}

pub fn task_head_name(task: FrameTask) -> &'static str {
    match task {
        FrameTask::Phase => "phase",
        FrameTask::Step => "step",
    }
}

pub fn task_label(task: FrameTask, kf: &KeyframeAnnotation) -> usize {
    match task {
        FrameTask::Phase => kf.phase_id,
        FrameTask::Step => kf.step_id,
    }
}

pub fn task_class_count(task: FrameTask, index: &DatasetIndex) -> usize {
    match task {
        FrameTask::Phase => index.taxonomy.phases.len(),
        FrameTask::Step => index.taxonomy.steps.len(),
    }
}

/// One (video, frame, label) training example for a frame-level task.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub video_id: String,
    pub frame_index: usize,
    pub label: usize,
}

/// Dense keyframes of the given videos as task samples.
pub fn frame_samples(
    index: &DatasetIndex,
    videos: &[String],
    task: FrameTask,
) -> Vec<FrameSample> {
    let mut out = Vec::new();
    for v in videos {
        for kf in index.keyframes_of(v) {
            out.push(FrameSample {
                video_id: kf.video_id.clone(),
                frame_index: kf.frame_index,
                label: task_label(task, kf),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

pub struct FrameTaskRun<'a> {
    pub encoder: &'a EncoderConfig,
    pub task: FrameTask,
    pub optim: &'a OptimConfig,
    /// Frame stride of the encoder clip window.
    pub clip_stride: usize,
    pub seed: u64,
    /// When set: metrics.csv plus per-epoch and final checkpoints.
    pub out_dir: Option<&'a Path>,
    /// Free-form configuration echo embedded in checkpoints.
    pub config_echo: String,
    /// Continue from a checkpoint written by an interrupted run.
    pub resume_from: Option<&'a Path>,
}

/// Fisher-Yates driven by the keyed stream cipher so the visit order for a
/// given (seed, epoch) never depends on anything else that consumed
/// randomness.
pub fn deterministic_shuffle<T>(items: &mut [T], seed: u64, label: &str) {
    use rand::Rng;
    let mut rng = rng_for(seed, label);
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Bundle parameters + optimizer state + progress into one checkpoint.
pub fn save_training_checkpoint(
    store: &ParamStore,
    optim_state: &BTreeMap<String, ndarray::ArrayD<f64>>,
    epochs_done: usize,
    path: &Path,
    echo: &str,
) -> Result<()> {
    let mut merged = store.clone();
    for (k, v) in optim_state {
        merged.insert(k, v.clone());
    }
    merged.insert(
        "train.epochs_done",
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), epochs_done as f64),
    );
    merged.save(path, echo)?;
    Ok(())
}

/// Split a loaded checkpoint back into parameters / optimizer state / epoch.
pub fn load_training_checkpoint(
    path: &Path,
) -> Result<(ParamStore, BTreeMap<String, ndarray::ArrayD<f64>>, usize, String)> {
    let (merged, echo) = ParamStore::load(path)?;
    let mut params = ParamStore::new(merged.seed());
    let mut optim = BTreeMap::new();
    let mut epochs_done = 0usize;
    for name in merged.names().cloned().collect::<Vec<_>>() {
        let arr = merged.get(&name).unwrap().clone();
        if name == "train.epochs_done" {
            epochs_done = arr[ndarray::IxDyn(&[])] as usize;
        } else if name.starts_with("optim.") {
            optim.insert(name, arr);
        } else {
            params.insert(&name, arr);
        }
    }
    Ok((params, optim, epochs_done, echo))
}

pub(crate) fn write_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss,lr\n");
    for r in records {
        writeln!(text, "{},{:.17e},{:.17e}", r.epoch, r.mean_loss, r.lr).expect("string write");
    }
    std::fs::write(path, text).map_err(|e| TapirError::io(path.display().to_string(), e))
}

/// Train a frame-level classification head (and fine-tune the encoder).
///
/// The head is created if missing; encoder parameters are initialized from
/// the store seed unless already present (e.g. transferred weights). Each
/// batch accumulates per-sample gradients in order, divides by the batch
/// length, and takes one SGD step at the scheduled learning rate.
pub fn train_frame_task(
    store: &mut ParamStore,
    run: &FrameTaskRun,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    train_videos: &[String],
) -> Result<TrainSummary> {
    run.encoder.validate()?;
    run.encoder.init_params(store);
    let n_classes = task_class_count(run.task, index);
    init_head(store, task_head_name(run.task), run.encoder.final_channels(), n_classes);

    let samples = frame_samples(index, train_videos, run.task);
    if samples.is_empty() {
        return Err(TapirError::Validation("no training samples".into()));
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
        deterministic_shuffle(&mut order, run.seed, &format!("shuffle/epoch{epoch}"));

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let lr = run.optim.lr_at(global_step as f64 / total_steps as f64);
            last_lr = lr;

            let mut grads: BTreeMap<String, ndarray::ArrayD<f64>> = BTreeMap::new();
            for &si in chunk {
                let s = &samples[si];
                let video = video_meta(index, &s.video_id)?;
                let clip = cache.clip(video, s.frame_index, run.encoder.clip_t, run.clip_stride)?;
                let mut sess = Session::new(store);
                let out = encode(&mut sess, &clip, run.encoder, None)?;
                let logits = head_logits(&mut sess, out.class_embedding, task_head_name(run.task));
                let rows = sess.tape.ce_with_logits(logits, &[s.label]);
                let loss = sess.tape.mean_all(rows);
                let value = sess.tape.value(loss)[ndarray::IxDyn(&[])];
                if !value.is_finite() {
                    return Err(TapirError::Numeric(format!(
                        "non-finite loss at epoch {epoch} batch {bi} ({}:{})",
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

/// Score every dense keyframe of `videos` with the trained head; returns
/// per-frame softmax distributions for the evaluation protocol.
pub fn frame_task_scores(
    store: &ParamStore,
    encoder: &EncoderConfig,
    task: FrameTask,
    index: &DatasetIndex,
    cache: &mut FrameCache,
    videos: &[String],
    clip_stride: usize,
) -> Result<Vec<FramePrediction>> {
    let mut out = Vec::new();
    for v in videos {
        let video = video_meta(index, v)?;
        for kf in index.keyframes_of(v) {
            let clip = cache.clip(video, kf.frame_index, encoder.clip_t, clip_stride)?;
            let mut sess = Session::new(store);
            let enc = encode(&mut sess, &clip, encoder, None)?;
            let logits = head_logits(&mut sess, enc.class_embedding, task_head_name(task));
            let probs = sess.tape.softmax_last(logits);
            let pv = sess.tape.value(probs);
            out.push(FramePrediction {
                video_id: kf.video_id.clone(),
                frame_index: kf.frame_index,
                scores: (0..pv.shape()[1]).map(|j| pv[[0, j]]).collect(),
            });
        }
    }
    Ok(out)
}

/// Fraction of predicted keyframes whose argmax matches the label.
pub fn frame_task_accuracy(
    preds: &[FramePrediction],
    index: &DatasetIndex,
    task: FrameTask,
) -> f64 {
    let mut keyed: BTreeMap<(&str, usize), &FramePrediction> = BTreeMap::new();
    for p in preds {
        keyed.insert((p.video_id.as_str(), p.frame_index), p);
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for kf in &index.keyframes {
        if let Some(p) = keyed.get(&(kf.video_id.as_str(), kf.frame_index)) {
            let argmax = p
                .scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == task_label(task, kf) {
                hit += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Start a new store seeded for `seed`, carrying over only encoder weights
/// from a pretrained store. Heads and optimizer state stay behind: transfer
/// experiments re-attach fresh heads to a pretrained trunk.
pub fn transfer_encoder(pretrained: &ParamStore, seed: u64) -> ParamStore {
    let mut out = ParamStore::new(seed);
    for name in pretrained.names().cloned().collect::<Vec<_>>() {
        if name.starts_with("encoder.") {
            out.insert(&name, pretrained.get(&name).unwrap().clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::StageConfig;
    use crate::synthetic::{render_dataset, GeneratorConfig, RenderedDataset};
    use tempfile::TempDir;

    fn small_dataset(dir: &Path) -> RenderedDataset {
        let config = GeneratorConfig {
            n_videos: 2,
            frames_per_video: 16,
            fps: 2,
            keyframe_stride_dense: 4,
            keyframe_stride_sparse: 8,
            seed: 60,
            ..GeneratorConfig::default()
        };
        render_dataset(&config, dir).unwrap()
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            patch: (2, 16, 16),
            c0: 8,
            clip_t: 4,
            image_size: (64, 64),
            stages: vec![StageConfig {
                blocks: 1,
                heads: 2,
                q_stride: (1, 1, 1),
                kv_stride: (1, 2, 2),
                channel_mult: 1,
            }],
            mlp_ratio: 2,
            dropout: 0.0,
        }
    }

    fn run_optim() -> OptimConfig {
        OptimConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 2,
            base_lr: 0.02,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn loss_decreases_and_artifacts_written() {
        let dir = TempDir::new().unwrap();
        let ds = small_dataset(dir.path());
        let videos: Vec<String> = ds.index.videos.iter().map(|v| v.video_id.clone()).collect();
        let mut cache = FrameCache::new(dir.path());
        let out_dir = dir.path().join("run");
        let encoder = tiny_encoder();
        let optim = run_optim();
        let mut store = ParamStore::new(1);
        let run = FrameTaskRun {
            encoder: &encoder,
            task: FrameTask::Phase,
            optim: &optim,
            clip_stride: 1,
            seed: 1,
            out_dir: Some(&out_dir),
            config_echo: "test".into(),
            resume_from: None,
        };
        let summary = train_frame_task(&mut store, &run, &ds.index, &mut cache, &videos).unwrap();
        assert_eq!(summary.records.len(), 4);
        assert!(summary.records[3].mean_loss < summary.records[0].mean_loss);
        assert!(out_dir.join("metrics.csv").exists());
        assert!(out_dir.join("epoch_000.ckpt").exists());

        let (params, optim_state, epochs_done, echo) =
            load_training_checkpoint(&summary.final_checkpoint.unwrap()).unwrap();
        assert_eq!(epochs_done, 4);
        assert_eq!(echo, "test");
        assert!(params.names().any(|n| n.starts_with("encoder.")));
        assert!(optim_state.keys().any(|k| k.starts_with("optim.momentum.")));
        assert!(params.names().all(|n| !n.starts_with("optim.")));
        assert!(!params.contains("train.epochs_done"));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_exactly() {
        let dir = TempDir::new().unwrap();
        let ds = small_dataset(dir.path());
        let videos: Vec<String> = ds.index.videos.iter().map(|v| v.video_id.clone()).collect();
        let mut cache = FrameCache::new(dir.path());
        let encoder = tiny_encoder();
        let optim = run_optim();
        let out_dir = dir.path().join("full");

        // Uninterrupted run; its per-epoch checkpoints double as the
        // interruption point for the resumed run.
        let mut store_full = ParamStore::new(7);
        let run_full = FrameTaskRun {
            encoder: &encoder,
            task: FrameTask::Phase,
            optim: &optim,
            clip_stride: 1,
            seed: 7,
            out_dir: Some(&out_dir),
            config_echo: String::new(),
            resume_from: None,
        };
        train_frame_task(&mut store_full, &run_full, &ds.index, &mut cache, &videos).unwrap();

        // Resume from the checkpoint written after epoch 1 (two epochs done).
        let ckpt = out_dir.join("epoch_001.ckpt");
        assert!(ckpt.exists());
        let mut store_resumed = ParamStore::new(7);
        let run_resume = FrameTaskRun {
            encoder: &encoder,
            task: FrameTask::Phase,
            optim: &optim,
            clip_stride: 1,
            seed: 7,
            out_dir: None,
            config_echo: String::new(),
            resume_from: Some(&ckpt),
        };
        train_frame_task(&mut store_resumed, &run_resume, &ds.index, &mut cache, &videos)
            .unwrap();

        assert_eq!(store_full.checksum(), store_resumed.checksum());
    }

    #[test]
    fn predictions_cover_all_dense_keyframes() {
        let dir = TempDir::new().unwrap();
        let ds = small_dataset(dir.path());
        let videos: Vec<String> = ds.index.videos.iter().map(|v| v.video_id.clone()).collect();
        let mut cache = FrameCache::new(dir.path());
        let encoder = tiny_encoder();
        let mut store = ParamStore::new(2);
        encoder.init_params(&mut store);
        init_head(&mut store, "phase", encoder.final_channels(), 11);
        let preds =
            frame_task_scores(&store, &encoder, FrameTask::Phase, &ds.index, &mut cache, &videos, 1)
                .unwrap();
        assert_eq!(preds.len(), ds.index.keyframes.len());
        for p in &preds {
            assert_eq!(p.scores.len(), 11);
            let s: f64 = p.scores.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let acc = frame_task_accuracy(&preds, &ds.index, FrameTask::Phase);
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn transfer_copies_only_encoder_weights() {
        let encoder = tiny_encoder();
        let mut store = ParamStore::new(3);
        encoder.init_params(&mut store);
        init_head(&mut store, "step", encoder.final_channels(), 20);
        let transferred = transfer_encoder(&store, 99);
        assert!(transferred.names().all(|n| n.starts_with("encoder.")));
        for name in transferred.names() {
            assert_eq!(transferred.get(name), store.get(name), "{name}");
        }
        assert!(!transferred.contains("head.step.w"));
        assert_eq!(transferred.seed(), 99);
    }

    #[test]
    fn shuffle_is_label_keyed_and_stable() {
        let mut a: Vec<usize> = (0..40).collect();
        let mut b: Vec<usize> = (0..40).collect();
        let mut c: Vec<usize> = (0..40).collect();
        deterministic_shuffle(&mut a, 5, "shuffle/epoch0");
        deterministic_shuffle(&mut b, 5, "shuffle/epoch0");
        deterministic_shuffle(&mut c, 5, "shuffle/epoch1");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    }
}
