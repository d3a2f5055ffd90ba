//! Experiment configuration: one JSON document pins everything a run needs
//! (dataset generation, model shapes, optimization, protocol knobs) so a
//! whole experiment can be replayed from the file plus a seed.

use crate::detector::DetectorConfig;
use crate::encoder::{EncoderConfig, StageConfig};
use crate::synthetic::GeneratorConfig;
use crate::training::boxes::{ACTION_CONFIDENCE_THRESHOLD, ACTION_MATCH_IOU};
use crate::training::cv::TaskKind;
use crate::training::OptimConfig;
use crate::{Result, TapirError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where the rendered dataset lives (or will be rendered).
    pub dataset_root: PathBuf,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub detector: DetectorConfig,
    pub frame_optim: OptimConfig,
    pub detector_optim: OptimConfig,
    pub action_optim: OptimConfig,
    /// Frame stride of encoder clip windows.
    pub clip_stride: usize,
    /// Detector confidence gate for action predictions.
    pub action_confidence: f64,
    /// Minimum IoU for a detection to inherit action labels in training.
    pub action_match_iou: f64,
    pub tasks: Vec<TaskKind>,
    /// Run directories, reports, and checkpoints go here.
    pub output_root: PathBuf,
}

impl ExperimentConfig {
    /// Full desk-scale experiment with the reference model shapes.
    pub fn full(workdir: &Path) -> Self {
        Self {
            seed: 17,
            dataset_root: workdir.join("dataset"),
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            detector: DetectorConfig::default(),
            frame_optim: OptimConfig::default(),
            detector_optim: OptimConfig::detector_default(),
            action_optim: OptimConfig::default(),
            clip_stride: 2,
            action_confidence: ACTION_CONFIDENCE_THRESHOLD,
            action_match_iou: ACTION_MATCH_IOU,
            tasks: TaskKind::ALL.to_vec(),
            output_root: workdir.join("out"),
        }
    }

    /// Minutes-scale configuration: tiny models, short schedules, a denser
    /// sparse-keyframe grid so the small dataset still yields box samples.
    pub fn smoke(workdir: &Path) -> Self {
        let mut c = Self::full(workdir);
        c.generator = GeneratorConfig {
            n_videos: 2,
            frames_per_video: 16,
            fps: 2,
            keyframe_stride_dense: 4,
            keyframe_stride_sparse: 8,
            seed: 17,
            ..GeneratorConfig::default()
        };
        c.encoder = EncoderConfig {
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
        };
        c.detector = DetectorConfig {
            channels: 16,
            heads: 2,
            points: 2,
            enc_layers: 1,
            dec_layers: 2,
            num_queries: 8,
            ffn_hidden: 32,
            num_classes: 7,
            image_size: (64, 64),
        };
        c.frame_optim = OptimConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            ..OptimConfig::default()
        };
        c.detector_optim = OptimConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            ..OptimConfig::detector_default()
        };
        c.action_optim = c.frame_optim.clone();
        // A two-epoch detector rarely clears the real confidence and IoU
        // gates; open both so the smoke run exercises the action path.
        c.action_confidence = 0.0;
        c.action_match_iou = 0.0;
        c.clip_stride = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.detector.validate()?;
        if self.clip_stride == 0 {
            return Err(TapirError::Validation("clip_stride must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(TapirError::Validation("no tasks requested".into()));
        }
        if !(0.0..=1.0).contains(&self.action_confidence) {
            return Err(TapirError::Validation(format!(
                "action confidence {} outside [0, 1]",
                self.action_confidence
            )));
        }
        if !(0.0..=1.0).contains(&self.action_match_iou) {
            return Err(TapirError::Validation(format!(
                "action match IoU {} outside [0, 1]",
                self.action_match_iou
            )));
        }
        if self.generator.image_size != self.encoder.image_size {
            return Err(TapirError::Validation(format!(
                "generator renders {:?} but the encoder expects {:?}",
                self.generator.image_size, self.encoder.image_size
            )));
        }
        let detector_needed = self.tasks.contains(&TaskKind::Instruments)
            || self.tasks.contains(&TaskKind::Actions);
        if detector_needed && self.generator.image_size != self.detector.image_size {
            return Err(TapirError::Validation(format!(
                "generator renders {:?} but the detector expects {:?}",
                self.generator.image_size, self.detector.image_size
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TapirError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| TapirError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| TapirError::io(path.display().to_string(), e))
    }
}
