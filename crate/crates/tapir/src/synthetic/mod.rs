//! Procedural toy-surgery dataset generation with fully consistent
//! hierarchical labels.

pub mod render;
pub mod script;

use crate::annotation::{
    BoundingBox, DatasetIndex, InstrumentInstance, KeyframeAnnotation, Taxonomy, VideoMeta,
    SCHEMA_VERSION,
};
use crate::{Result, TapirError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use tapir_autograd::params::rng_for;

use script::SceneScript;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub fps: usize,
    /// (height, width) pixels.
    pub image_size: (usize, usize),
    /// Frames between phase/step keyframes.
    pub keyframe_stride_dense: usize,
    /// Frames between box-annotated keyframes; multiple of the dense stride
    /// so sparse keyframes are a subset of dense ones.
    pub keyframe_stride_sparse: usize,
    pub phase_priors: Vec<f64>,
    pub step_priors: Vec<f64>,
    pub instrument_priors: Vec<f64>,
    pub action_priors: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let fps = 2;
        let mut phase_priors = vec![0.08; 11];
        phase_priors[0] = 0.15;
        phase_priors[10] = 0.13;
        Self {
            n_videos: 8,
            frames_per_video: 70 * fps,
            fps,
            image_size: (64, 64),
            // One phase/step keyframe per second, one box keyframe per 35 s.
            keyframe_stride_dense: fps,
            keyframe_stride_sparse: 35 * fps,
            phase_priors,
            step_priors: vec![1.0 / 20.0; 20],
            instrument_priors: vec![1.0 / 7.0; 7],
            action_priors: vec![1.0 / 16.0; 16],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let check_prior = |name: &str, p: &[f64], n: usize| -> Result<()> {
            if p.len() != n {
                return Err(TapirError::Validation(format!(
                    "{name} priors: expected {n} entries, got {}",
                    p.len()
                )));
            }
            if p.iter().any(|&x| x < 0.0) {
                return Err(TapirError::Validation(format!("{name} priors: negative mass")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(TapirError::Validation(format!(
                    "{name} priors sum to {sum}, expected 1"
                )));
            }
            Ok(())
        };
        if self.n_videos == 0 || self.frames_per_video == 0 || self.fps == 0 {
            return Err(TapirError::Validation(
                "n_videos, frames_per_video, fps must be positive".into(),
            ));
        }
        if self.keyframe_stride_dense == 0 || self.keyframe_stride_sparse == 0 {
            return Err(TapirError::Validation("keyframe strides must be ≥ 1".into()));
        }
        if self.keyframe_stride_sparse % self.keyframe_stride_dense != 0 {
            return Err(TapirError::Validation(
                "sparse keyframe stride must be a multiple of the dense stride".into(),
            ));
        }
        if self.image_size.0 < 32 || self.image_size.1 < 32 {
            return Err(TapirError::Validation("image size below 32×32".into()));
        }
        check_prior("phase", &self.phase_priors, 11)?;
        check_prior("step", &self.step_priors, 20)?;
        check_prior("instrument", &self.instrument_priors, 7)?;
        check_prior("action", &self.action_priors, 16)?;
        Ok(())
    }

    pub fn video_id(&self, index: usize) -> String {
        format!("video{index:02}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoManifest {
    pub video_id: String,
    /// Hex SHA-256 of each frame's raw RGB bytes, in frame order.
    pub frame_checksums: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    pub videos: Vec<VideoManifest>,
    pub annotations_checksum: String,
}

#[derive(Debug)]
pub struct RenderedDataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub manifest: Manifest,
}

/// Build the annotation records for one scripted video.
fn annotate_video(
    config: &GeneratorConfig,
    script: &SceneScript,
    video_id: &str,
) -> Vec<KeyframeAnnotation> {
    let (height, width) = config.image_size;
    let mut out = Vec::new();
    let mut frame = 0;
    while frame < config.frames_per_video {
        let seg = script.segment_at(frame);
        let sparse = frame % config.keyframe_stride_sparse == 0;
        let mut instances = Vec::new();
        if sparse {
            for track in &seg.tracks {
                instances.push(InstrumentInstance {
                    bbox: render::analytic_box(seg, track, frame, height, width),
                    instrument_id: track.instrument_id,
                    action_ids: seg.actions_at(track, frame),
                });
            }
        }
        out.push(KeyframeAnnotation {
            video_id: video_id.to_string(),
            frame_index: frame,
            phase_id: seg.phase_id,
            step_id: seg.step_id,
            instances,
            has_box_annotations: sparse,
        });
        frame += config.keyframe_stride_dense;
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Script, rasterize, and write one video; returns its annotations and
/// per-frame checksums. Pure function of (config, video index).
fn build_video(
    config: &GeneratorConfig,
    video_index: usize,
    root: &Path,
) -> Result<(Vec<KeyframeAnnotation>, VideoManifest)> {
    let video_id = config.video_id(video_index);
    let mut rng = rng_for(config.seed, &format!("video/{video_index}"));
    let segments = script::script_procedure(config, &mut rng);
    let script = SceneScript {
        video_index,
        segments,
    };
    let texture = render::Texture::from_rng(&mut rng);
    let (height, width) = config.image_size;

    let dir = root.join("videos").join(&video_id);
    std::fs::create_dir_all(&dir).map_err(|e| TapirError::io(dir.display().to_string(), e))?;

    let mut checksums = Vec::with_capacity(config.frames_per_video);
    for frame in 0..config.frames_per_video {
        let buf = render::render_frame(&script, frame, height, width, &texture);
        checksums.push(sha_hex(&buf));
        let path = dir.join(format!("{frame:05}.png"));
        let img =
            image::RgbImage::from_raw(width as u32, height as u32, buf).expect("buffer size");
        img.save(&path)
            .map_err(|e| TapirError::Other(format!("write {}: {e}", path.display())))?;
    }

    Ok((
        annotate_video(config, &script, &video_id),
        VideoManifest {
            video_id,
            frame_checksums: checksums,
        },
    ))
}

/// Generate the full dataset under `root`: frames, annotations.json, and a
/// manifest with checksums. Honors an existing identical dataset (no-op).
pub fn render_dataset(config: &GeneratorConfig, root: &Path) -> Result<RenderedDataset> {
    config.validate()?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(existing) = load_manifest(&manifest_path) {
            if existing.config == *config {
                let index = DatasetIndex::load(&root.join("annotations.json"))?;
                return Ok(RenderedDataset {
                    root: root.to_path_buf(),
                    index,
                    manifest: existing,
                });
            }
        }
        return Err(TapirError::Validation(format!(
            "dataset at {} was generated from a different config",
            root.display()
        )));
    }
    std::fs::create_dir_all(root).map_err(|e| TapirError::io(root.display().to_string(), e))?;

    let results: Vec<Result<(Vec<KeyframeAnnotation>, VideoManifest)>> = (0..config.n_videos)
        .into_par_iter()
        .map(|i| build_video(config, i, root))
        .collect();

    let mut keyframes = Vec::new();
    let mut videos_meta = Vec::new();
    let mut video_manifests = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (kfs, vm) = r?;
        keyframes.extend(kfs);
        videos_meta.push(VideoMeta {
            video_id: config.video_id(i),
            frame_count: config.frames_per_video,
            frames_per_second: config.fps,
        });
        video_manifests.push(vm);
    }

    let index = DatasetIndex {
        schema: SCHEMA_VERSION.to_string(),
        taxonomy: Taxonomy::synthetic(),
        videos: videos_meta,
        keyframes,
    };
    let annotations_text = index.to_json();
    std::fs::write(root.join("annotations.json"), &annotations_text)
        .map_err(|e| TapirError::io(root.display().to_string(), e))?;

    let manifest = Manifest {
        config: config.clone(),
        videos: video_manifests,
        annotations_checksum: sha_hex(annotations_text.as_bytes()),
    };
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| TapirError::io(manifest_path.display().to_string(), e))?;

    Ok(RenderedDataset {
        root: root.to_path_buf(),
        index,
        manifest,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| TapirError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| TapirError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Kinds of schema corruption the fault injector can apply; each injected
/// fault triggers exactly one validator rule.
#[derive(Debug, Clone, Copy, PartialEq)]
enum FaultKind {
    ActionCardinality,
    Partonomy,
    BoxCoordinates,
    InstrumentRange,
    FrameRange,
}

/// Corrupt `n` distinct keyframes, one fault each. Returns human-readable
/// descriptions; `validate_dataset` afterwards reports exactly `n`
/// violations.
pub fn inject_faults(index: &mut DatasetIndex, n: usize, seed: u64) -> Vec<String> {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, "fault-injection");
    let with_instances: Vec<usize> = index
        .keyframes
        .iter()
        .enumerate()
        .filter(|(_, k)| !k.instances.is_empty())
        .map(|(i, _)| i)
        .collect();
    let all: Vec<usize> = (0..index.keyframes.len()).collect();

    // Interleave fault kinds; instance-level kinds need instance keyframes.
    let kinds = [
        FaultKind::ActionCardinality,
        FaultKind::Partonomy,
        FaultKind::BoxCoordinates,
        FaultKind::InstrumentRange,
        FaultKind::FrameRange,
    ];
    let mut instance_pool = with_instances;
    instance_pool.shuffle(&mut rng);
    let mut frame_pool: Vec<usize> = all
        .iter()
        .copied()
        .filter(|i| !instance_pool.contains(i))
        .collect();
    frame_pool.shuffle(&mut rng);

    let mut used = std::collections::BTreeSet::new();
    let mut descriptions = Vec::new();
    let mut kind_idx = 0usize;
    while descriptions.len() < n {
        let kind = kinds[kind_idx % kinds.len()];
        kind_idx += 1;
        let needs_instance = matches!(
            kind,
            FaultKind::ActionCardinality | FaultKind::BoxCoordinates | FaultKind::InstrumentRange
        );
        let pool = if needs_instance {
            &mut instance_pool
        } else {
            &mut frame_pool
        };
        let Some(target) = pool.iter().copied().find(|i| !used.contains(i)) else {
            continue; // pool exhausted; another kind will pick a frame
        };
        used.insert(target);
        pool.retain(|&i| i != target);
        let kf = &mut index.keyframes[target];
        let label = format!("{}:{}", kf.video_id, kf.frame_index);
        match kind {
            FaultKind::ActionCardinality => {
                kf.instances[0].action_ids = vec![0, 1, 2, 3];
                descriptions.push(format!("{label} action cardinality 4"));
            }
            FaultKind::Partonomy => {
                // A step from a different phase: valid index, invalid parent.
                let bad_step = if kf.step_id == 19 { 1 } else { 19 };
                kf.step_id = bad_step;
                descriptions.push(format!("{label} step {bad_step} under phase {}", kf.phase_id));
            }
            FaultKind::BoxCoordinates => {
                let b = &mut kf.instances[0].bbox;
                b.x2 = b.x1 - 0.01;
                descriptions.push(format!("{label} inverted box"));
            }
            FaultKind::InstrumentRange => {
                kf.instances[0].instrument_id = 99;
                descriptions.push(format!("{label} instrument id 99"));
            }
            FaultKind::FrameRange => {
                let count = index
                    .videos
                    .iter()
                    .find(|v| v.video_id == kf.video_id)
                    .map(|v| v.frame_count)
                    .unwrap_or(0);
                kf.frame_index = count + 7;
                descriptions.push(format!("{label} frame index {} out of range", kf.frame_index));
            }
        }
    }
    descriptions
}

/// Mean RGB (in [0,1]) inside a normalized box of a raw frame buffer.
pub fn mean_color_in_box(
    frame: &[u8],
    height: usize,
    width: usize,
    bbox: &BoundingBox,
) -> [f64; 3] {
    let x_lo = (bbox.x1 * width as f64).floor().max(0.0) as usize;
    let x_hi = ((bbox.x2 * width as f64).ceil() as usize).min(width);
    let y_lo = (bbox.y1 * height as f64).floor().max(0.0) as usize;
    let y_hi = ((bbox.y2 * height as f64).ceil() as usize).min(height);
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let o = (y * width + x) * 3;
            for c in 0..3 {
                acc[c] += frame[o + c] as f64 / 255.0;
            }
            n += 1;
        }
    }
    if n > 0 {
        for c in &mut acc {
            *c /= n as f64;
        }
    }
    acc
}
