//! Hierarchical annotation schema: phases, steps, instrument instances with
//! atomic actions, dataset indexing, validation, fold splits, and clip
//! windows.
//!
//! On disk a dataset is one JSON document (see [`DatasetIndex::to_json`])
//! with a mandatory `"schema": "psiava-schema/1"` marker.

use crate::{Result, TapirError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const SCHEMA_VERSION: &str = "psiava-schema/1";

/// Category vocabularies and the phase→step partonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub phases: Vec<String>,
    pub steps: Vec<String>,
    pub instruments: Vec<String>,
    pub actions: Vec<String>,
    /// Phase id (as string key, JSON maps need string keys) → valid step ids.
    pub phase_to_steps: BTreeMap<String, BTreeSet<usize>>,
    pub idle_phase_id: usize,
    pub idle_step_id: usize,
}

impl Taxonomy {
    /// The synthetic vocabulary: 11 phases, 20 steps, 7 instruments,
    /// 16 actions. Phase 0 is Idle with the single Idle step; phases 1–9 own
    /// two steps each; the closing phase owns the final step.
    pub fn synthetic() -> Self {
        let phases: Vec<String> = std::iter::once("Idle".to_string())
            .chain((1..=9).map(|i| format!("Phase{i}")))
            .chain(std::iter::once("Closure".to_string()))
            .collect();
        let mut steps = vec!["IdleStep".to_string()];
        for i in 1..=9 {
            steps.push(format!("Step{}a", i));
            steps.push(format!("Step{}b", i));
        }
        steps.push("FinalStep".to_string());
        let instruments = vec![
            "GraspingForceps",
            "Scissors",
            "NeedleDriver",
            "SuctionTube",
            "CauteryHook",
            "ClipApplier",
            "Retractor",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        // Three orthogonal groups: translation pattern (always one), size
        // pattern (optional), target relation (optional).
        let actions = vec![
            "Still",
            "MoveUp",
            "MoveDown",
            "MoveLeft",
            "MoveRight",
            "OrbitCw",
            "OrbitCcw",
            "OscillateH",
            "OscillateV",
            "Grow",
            "Shrink",
            "Pulse",
            "Contact",
            "Hover",
            "Approach",
            "Retreat",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        let mut phase_to_steps = BTreeMap::new();
        phase_to_steps.insert("0".to_string(), BTreeSet::from([0]));
        for i in 1..=9usize {
            phase_to_steps.insert(i.to_string(), BTreeSet::from([2 * i - 1, 2 * i]));
        }
        phase_to_steps.insert("10".to_string(), BTreeSet::from([19]));
        Self {
            phases,
            steps,
            instruments,
            actions,
            phase_to_steps,
            idle_phase_id: 0,
            idle_step_id: 0,
        }
    }

    pub fn steps_of(&self, phase_id: usize) -> Option<&BTreeSet<usize>> {
        self.phase_to_steps.get(&phase_id.to_string())
    }
}

/// Axis-aligned box in normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn is_valid(&self) -> bool {
        0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= 1.0
            && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= 1.0
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Center form (cx, cy, w, h) used inside the detector.
    pub fn to_center(&self) -> [f64; 4] {
        [
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn from_center(c: [f64; 4]) -> Self {
        Self {
            x1: c[0] - 0.5 * c[2],
            y1: c[1] - 0.5 * c[3],
            x2: c[0] + 0.5 * c[2],
            y2: c[1] + 0.5 * c[3],
        }
    }
}

/// One instrument appearing on a keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentInstance {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub instrument_id: usize,
    pub action_ids: Vec<usize>,
}

/// An annotated frame. Dense keyframes carry only (phase, step); sparse ones
/// additionally carry instrument instances and set `has_box_annotations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeAnnotation {
    pub video_id: String,
    pub frame_index: usize,
    pub phase_id: usize,
    pub step_id: usize,
    pub instances: Vec<InstrumentInstance>,
    pub has_box_annotations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub frame_count: usize,
    pub frames_per_second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema: String,
    pub taxonomy: Taxonomy,
    pub videos: Vec<VideoMeta>,
    pub keyframes: Vec<KeyframeAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub video_id: String,
    pub frame_index: Option<usize>,
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl DatasetIndex {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TapirError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TapirError::io(path.display().to_string(), e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| TapirError::io(path.display().to_string(), e))
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Keyframes of one video, in stored (frame-index) order.
    pub fn keyframes_of<'a>(&'a self, video_id: &str) -> Vec<&'a KeyframeAnnotation> {
        self.keyframes
            .iter()
            .filter(|k| k.video_id == video_id)
            .collect()
    }
}

/// Check every schema invariant; returns one entry per violated rule so
/// fault-injection counts line up one-to-one. Never panics on bad data.
pub fn validate_dataset(index: &DatasetIndex) -> ValidationReport {
    let mut out = ValidationReport::default();
    let mut push = |video_id: &str, frame: Option<usize>, rule: &str, detail: String| {
        out.violations.push(Violation {
            video_id: video_id.to_string(),
            frame_index: frame,
            rule: rule.to_string(),
            detail,
        });
    };

    if index.schema != SCHEMA_VERSION {
        push(
            "",
            None,
            "schema version",
            format!("expected {SCHEMA_VERSION}, got {}", index.schema),
        );
    }
    let tax = &index.taxonomy;
    if tax.phases.len() != 11 || tax.steps.len() != 20 || tax.instruments.len() != 7
        || tax.actions.len() != 16
    {
        push(
            "",
            None,
            "taxonomy cardinality",
            format!(
                "got {} phases, {} steps, {} instruments, {} actions",
                tax.phases.len(),
                tax.steps.len(),
                tax.instruments.len(),
                tax.actions.len()
            ),
        );
    }
    let covered: BTreeSet<usize> = tax.phase_to_steps.values().flatten().copied().collect();
    for step_id in 0..tax.steps.len() {
        if !covered.contains(&step_id) {
            push(
                "",
                None,
                "orphan step",
                format!("step {step_id} appears under no phase"),
            );
        }
    }
    if tax.idle_phase_id >= tax.phases.len() || tax.idle_step_id >= tax.steps.len() {
        push("", None, "idle index range", String::new());
    }

    let mut seen_videos = BTreeSet::new();
    for v in &index.videos {
        if !seen_videos.insert(v.video_id.clone()) {
            push(&v.video_id, None, "duplicate video", String::new());
        }
    }
    let frame_counts: BTreeMap<&str, usize> = index
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.frame_count))
        .collect();

    for kf in &index.keyframes {
        let vid = kf.video_id.as_str();
        let frame = Some(kf.frame_index);
        match frame_counts.get(vid) {
            None => push(vid, frame, "unknown video", String::new()),
            Some(&count) if kf.frame_index >= count => push(
                vid,
                frame,
                "frame index range",
                format!("frame {} ≥ frame_count {}", kf.frame_index, count),
            ),
            _ => {}
        }
        if kf.phase_id >= tax.phases.len() {
            push(vid, frame, "phase id range", format!("phase {}", kf.phase_id));
        } else if kf.step_id >= tax.steps.len() {
            push(vid, frame, "step id range", format!("step {}", kf.step_id));
        } else {
            let ok = tax
                .steps_of(kf.phase_id)
                .map(|s| s.contains(&kf.step_id))
                .unwrap_or(false);
            if !ok {
                push(
                    vid,
                    frame,
                    "partonomy",
                    format!("step {} not valid under phase {}", kf.step_id, kf.phase_id),
                );
            }
        }
        if !kf.instances.is_empty() && !kf.has_box_annotations {
            push(vid, frame, "instances imply box annotations", String::new());
        }
        for (i, inst) in kf.instances.iter().enumerate() {
            if inst.instrument_id >= tax.instruments.len() {
                push(
                    vid,
                    frame,
                    "instrument id range",
                    format!("instance {i}: id {}", inst.instrument_id),
                );
            }
            let n_actions = inst.action_ids.len();
            if n_actions == 0 || n_actions > 3 {
                push(
                    vid,
                    frame,
                    "action cardinality",
                    format!("instance {i}: {n_actions} actions"),
                );
            } else {
                for &a in &inst.action_ids {
                    if a >= tax.actions.len() {
                        push(vid, frame, "action id range", format!("instance {i}: action {a}"));
                    }
                }
            }
            if !inst.bbox.is_valid() {
                push(
                    vid,
                    frame,
                    "box coordinates",
                    format!(
                        "instance {i}: ({}, {}, {}, {})",
                        inst.bbox.x1, inst.bbox.y1, inst.bbox.x2, inst.bbox.y2
                    ),
                );
            }
        }
    }
    out
}

/// Two disjoint groups of videos; all cross-validation runs derive from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: [Vec<String>; 2],
}

impl FoldSplit {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        (0..2).find(|&f| self.folds[f].iter().any(|v| v == video_id))
    }
}

/// Build the two folds from an explicit assignment map.
pub fn build_folds(
    index: &DatasetIndex,
    assignment: &BTreeMap<String, usize>,
) -> Result<FoldSplit> {
    let mut folds: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for v in &index.videos {
        match assignment.get(&v.video_id) {
            None => {
                return Err(TapirError::Validation(format!(
                    "video {} missing from fold assignment",
                    v.video_id
                )))
            }
            Some(&f) if f < 2 => folds[f].push(v.video_id.clone()),
            Some(&f) => {
                return Err(TapirError::Validation(format!(
                    "video {} assigned to fold {f}, expected 0 or 1",
                    v.video_id
                )))
            }
        }
    }
    for extra in assignment.keys() {
        if index.video(extra).is_none() {
            return Err(TapirError::Validation(format!(
                "assignment names unknown video {extra}"
            )));
        }
    }
    if index.videos.len() % 2 == 0 && folds[0].len() != folds[1].len() {
        return Err(TapirError::Validation(format!(
            "uneven folds {} / {} over an even video count",
            folds[0].len(),
            folds[1].len()
        )));
    }
    Ok(FoldSplit { folds })
}

/// Default split: alternate videos (in index order) between the folds.
pub fn default_folds(index: &DatasetIndex) -> Result<FoldSplit> {
    let assignment = index
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.video_id.clone(), i % 2))
        .collect();
    build_folds(index, &assignment)
}

/// Frame indices of the clip centered on a keyframe: the keyframe sits at
/// position ⌊T/2⌋; out-of-range indices clamp to the first/last frame.
pub fn clip_window(frame_index: usize, frame_count: usize, t: usize, stride: usize) -> Vec<usize> {
    assert!(t >= 1 && stride >= 1 && frame_count >= 1);
    let center = t / 2;
    (0..t)
        .map(|k| {
            let offset = k as i64 - center as i64;
            let idx = frame_index as i64 + stride as i64 * offset;
            idx.clamp(0, frame_count as i64 - 1) as usize
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_index() -> DatasetIndex {
        let taxonomy = Taxonomy::synthetic();
        DatasetIndex {
            schema: SCHEMA_VERSION.to_string(),
            taxonomy,
            videos: vec![
                VideoMeta {
                    video_id: "v0".into(),
                    frame_count: 100,
                    frames_per_second: 2,
                },
                VideoMeta {
                    video_id: "v1".into(),
                    frame_count: 100,
                    frames_per_second: 2,
                },
            ],
            keyframes: vec![
                KeyframeAnnotation {
                    video_id: "v0".into(),
                    frame_index: 10,
                    phase_id: 1,
                    step_id: 1,
                    instances: vec![InstrumentInstance {
                        bbox: BoundingBox {
                            x1: 0.1,
                            y1: 0.2,
                            x2: 0.3,
                            y2: 0.4,
                        },
                        instrument_id: 2,
                        action_ids: vec![0, 12],
                    }],
                    has_box_annotations: true,
                },
                KeyframeAnnotation {
                    video_id: "v1".into(),
                    frame_index: 20,
                    phase_id: 0,
                    step_id: 0,
                    instances: vec![],
                    has_box_annotations: false,
                },
            ],
        }
    }

    #[test]
    fn valid_dataset_has_empty_report() {
        assert!(validate_dataset(&tiny_index()).is_valid());
    }

    #[test]
    fn four_actions_is_one_cardinality_violation() {
        let mut index = tiny_index();
        index.keyframes[0].instances[0].action_ids = vec![0, 1, 2, 3];
        let report = validate_dataset(&index);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].rule, "action cardinality");
    }

    #[test]
    fn step_outside_phase_is_partonomy_violation() {
        let mut index = tiny_index();
        index.keyframes[0].step_id = 19; // belongs to the closing phase
        let report = validate_dataset(&index);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].rule, "partonomy");
    }

    #[test]
    fn degenerate_box_is_coordinate_violation() {
        let mut index = tiny_index();
        index.keyframes[0].instances[0].bbox.x2 = 0.05; // x2 < x1
        let report = validate_dataset(&index);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].rule, "box coordinates");
    }

    #[test]
    fn fold_assignment_must_cover_all_videos() {
        let index = tiny_index();
        let mut assignment = BTreeMap::new();
        assignment.insert("v0".to_string(), 0usize);
        let err = build_folds(&index, &assignment).unwrap_err();
        assert!(err.to_string().contains("v1"));
    }

    #[test]
    fn folds_partition_videos() {
        let index = tiny_index();
        let split = default_folds(&index).unwrap();
        assert_eq!(split.folds[0], vec!["v0".to_string()]);
        assert_eq!(split.folds[1], vec!["v1".to_string()]);
        assert_eq!(split.fold_of("v1"), Some(1));
    }

    #[test]
    fn clip_window_centered_case() {
        // 16-frame window around frame 100: eight before, seven after.
        let w = clip_window(100, 1000, 16, 1);
        assert_eq!(w, (92..108).collect::<Vec<_>>());
        assert_eq!(w[8], 100);
    }

    #[test]
    fn clip_window_clamps_at_start() {
        let w = clip_window(0, 1000, 16, 1);
        let expected: Vec<usize> = std::iter::repeat(0)
            .take(9)
            .chain(1..=7)
            .collect();
        assert_eq!(w, expected);
    }

    #[test]
    fn clip_window_with_stride() {
        assert_eq!(clip_window(5, 1000, 3, 2), vec![3, 5, 7]);
    }

    #[test]
    fn box_center_roundtrip() {
        let b = BoundingBox {
            x1: 0.15,
            y1: 0.25,
            x2: 0.55,
            y2: 0.85,
        };
        let c = b.to_center();
        let back = BoundingBox::from_center(c);
        assert!((b.x1 - back.x1).abs() < 1e-15);
        assert!((b.y2 - back.y2).abs() < 1e-15);
        assert!((c[0] - 0.35).abs() < 1e-15 && (c[1] - 0.55).abs() < 1e-15);
        assert!((c[2] - 0.4).abs() < 1e-15 && (c[3] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip_preserves_index() {
        let index = tiny_index();
        let text = index.to_json();
        assert!(text.contains("psiava-schema/1"));
        let back = DatasetIndex::from_json(&text, "inline").unwrap();
        assert_eq!(index, back);
    }
}
