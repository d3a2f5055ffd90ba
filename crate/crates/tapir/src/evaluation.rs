//! Metrics: frame-level mAP for phase/step recognition, and detection mAP at
//! an IoU threshold for instrument and atomic-action recognition.
//!
//! Conventions fixed here (the upstream protocol leaves them open):
//! - AP is "all-points": the mean over positives of precision at each
//!   positive's rank, no interpolation.
//! - Ranking sorts scores descending with a stable sort, so ties keep input
//!   order.
//! - A detection matches the unmatched same-frame ground truth of its class
//!   with the highest IoU ≥ threshold; IoU ties pick the lowest ground-truth
//!   index.
//! - Classes with zero ground truth are excluded from the mean, not scored 0.

use crate::annotation::{BoundingBox, KeyframeAnnotation};
use crate::{Result, TapirError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-keyframe score vector for a frame-level task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FramePrediction {
    pub video_id: String,
    pub frame_index: usize,
    pub scores: Vec<f64>,
}

/// One predicted box with per-class scores (7 instrument or 16 action).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionPrediction {
    pub video_id: String,
    pub frame_index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTask {
    Phase,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    Instrument,
    Action,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub fold: Option<usize>,
    /// class id → AP, only classes with ≥1 ground-truth entry.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
}

/// Intersection-over-union of two normalized boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// All-points average precision over a ranked relevance list.
///
/// `ranked` must already be in evaluation order (best score first). Panics if
/// there are no positives; callers exclude such classes beforehand.
pub fn average_precision(ranked: &[bool]) -> f64 {
    let positives = ranked.iter().filter(|&&r| r).count();
    assert!(positives > 0, "average_precision needs ≥1 positive");
    precision_mean(ranked, positives)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Σ over relevant ranks of tp/rank, as a reduced exact fraction, or `None`
/// once the running numerator or denominator overflows u128.
fn exact_precision_mass(ranked: &[bool]) -> Option<(u128, u128)> {
    let mut tp: u128 = 0;
    let mut num: u128 = 0;
    let mut den: u128 = 1;
    for (rank, &rel) in ranked.iter().enumerate() {
        if !rel {
            continue;
        }
        tp += 1;
        let r = rank as u128 + 1;
        // num/den + tp/r over the common denominator den·r/g.
        let g = gcd(den, r);
        let (n, d) = num
            .checked_mul(r / g)
            .zip(tp.checked_mul(den / g))
            .and_then(|(a, b)| a.checked_add(b))
            .zip(den.checked_mul(r / g))?;
        let g2 = gcd(n, d);
        num = n / g2;
        den = d / g2;
    }
    Some((num, den))
}

/// (Σ over relevant ranks of tp/rank) / denominator.
///
/// The precision mass is a rational with a modest denominator; while it fits
/// in u128 (and both sides of the final fraction fit in 53 bits) the whole
/// computation rounds exactly once, so hand-derivable values like 5/6 or
/// 29/36 compare equal to their literal spellings. Longer rankings fall back
/// to compensated floating-point summation.
fn precision_mean(ranked: &[bool], denominator: usize) -> f64 {
    const EXACT_MAX: u128 = 1 << 53;
    if let Some((num, den)) = exact_precision_mass(ranked) {
        if let Some(full_den) = den.checked_mul(denominator as u128) {
            let g = gcd(num, full_den);
            let (n, d) = (num / g, full_den / g);
            if n <= EXACT_MAX && d <= EXACT_MAX {
                return n as f64 / d as f64;
            }
        }
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (rank, &rel) in ranked.iter().enumerate() {
        if rel {
            tp += 1;
            let term = tp as f64 / (rank + 1) as f64;
            let t = sum + term;
            comp += if sum.abs() >= term.abs() {
                (sum - t) + term
            } else {
                (term - t) + sum
            };
            sum = t;
        }
    }
    (sum + comp) / denominator as f64
}

/// Stable ranking by descending score; ties keep input order.
fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order
}

fn frame_label(kf: &KeyframeAnnotation, task: FrameTask) -> usize {
    match task {
        FrameTask::Phase => kf.phase_id,
        FrameTask::Step => kf.step_id,
    }
}

/// Frame-level mAP: one score vector per annotated keyframe, one label per
/// keyframe, AP per class over the keyframe ranking.
pub fn frame_map(
    preds: &[FramePrediction],
    gt: &[&KeyframeAnnotation],
    n_classes: usize,
    task: FrameTask,
) -> Result<EvalReport> {
    // Pair every ground-truth keyframe with its prediction; hard error when
    // any is missing.
    let mut by_key: BTreeMap<(&str, usize), &FramePrediction> = BTreeMap::new();
    for p in preds {
        by_key.insert((p.video_id.as_str(), p.frame_index), p);
    }
    let mut missing = Vec::new();
    let mut paired: Vec<(&FramePrediction, usize)> = Vec::with_capacity(gt.len());
    for kf in gt {
        match by_key.get(&(kf.video_id.as_str(), kf.frame_index)) {
            Some(p) => paired.push((p, frame_label(kf, task))),
            None => missing.push(format!("{}:{}", kf.video_id, kf.frame_index)),
        }
    }
    if !missing.is_empty() {
        return Err(TapirError::Validation(format!(
            "missing predictions for keyframes: {}",
            missing.join(", ")
        )));
    }

    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for class in 0..n_classes {
        let gt_count = paired.iter().filter(|(_, label)| *label == class).count();
        if gt_count == 0 {
            continue;
        }
        let scores: Vec<f64> = paired.iter().map(|(p, _)| p.scores[class]).collect();
        let order = rank_descending(&scores);
        let ranked: Vec<bool> = order.iter().map(|&i| paired[i].1 == class).collect();
        per_class_ap.insert(class, average_precision(&ranked));
        counts.insert(
            class,
            ClassCounts {
                true_positives: gt_count,
                false_positives: paired.len() - gt_count,
                missed: 0,
            },
        );
    }
    let mean_ap = mean_of(&per_class_ap);
    Ok(EvalReport {
        task: format!("{task:?}").to_lowercase(),
        fold: None,
        per_class_ap,
        mean_ap,
        counts,
    })
}

/// One single-class ground-truth target for detection matching.
#[derive(Debug, Clone)]
struct GtTarget {
    video_id: String,
    frame_index: usize,
    bbox: BoundingBox,
    class: usize,
}

/// Expand keyframe instances into matching targets. Instrument mode yields
/// one target per instance; action mode yields one per (instance, action).
fn expand_targets(gt: &[&KeyframeAnnotation], mode: DetectionMode) -> Vec<GtTarget> {
    let mut out = Vec::new();
    for kf in gt {
        for inst in &kf.instances {
            match mode {
                DetectionMode::Instrument => out.push(GtTarget {
                    video_id: kf.video_id.clone(),
                    frame_index: kf.frame_index,
                    bbox: inst.bbox,
                    class: inst.instrument_id,
                }),
                DetectionMode::Action => {
                    for &a in &inst.action_ids {
                        out.push(GtTarget {
                            video_id: kf.video_id.clone(),
                            frame_index: kf.frame_index,
                            bbox: inst.bbox,
                            class: a,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Detection-mode mAP at an IoU threshold.
pub fn detection_map(
    preds: &[DetectionPrediction],
    gt: &[&KeyframeAnnotation],
    n_classes: usize,
    iou_thr: f64,
    mode: DetectionMode,
) -> EvalReport {
    let targets = expand_targets(gt, mode);
    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();

    for class in 0..n_classes {
        let class_targets: Vec<(usize, &GtTarget)> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.class == class)
            .collect();
        if class_targets.is_empty() {
            continue;
        }
        let scores: Vec<f64> = preds.iter().map(|p| p.scores[class]).collect();
        let order = rank_descending(&scores);

        let mut matched = vec![false; class_targets.len()];
        let mut ranked = Vec::with_capacity(order.len());
        for &pi in &order {
            let p = &preds[pi];
            // Best unmatched same-frame target by IoU; ties → lowest gt index.
            let mut best: Option<(usize, f64)> = None;
            for (slot, (_, t)) in class_targets.iter().enumerate() {
                if matched[slot]
                    || t.video_id != p.video_id
                    || t.frame_index != p.frame_index
                {
                    continue;
                }
                let overlap = iou(&p.bbox, &t.bbox);
                if overlap < iou_thr {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((slot, overlap));
                }
            }
            match best {
                Some((slot, _)) => {
                    matched[slot] = true;
                    ranked.push(true);
                }
                None => ranked.push(false),
            }
        }
        // AP denominator is the full ground-truth count: targets never
        // retrieved at any rank still count against recall.
        let tp = ranked.iter().filter(|&&r| r).count();
        per_class_ap.insert(class, precision_mean(&ranked, class_targets.len()));
        counts.insert(
            class,
            ClassCounts {
                true_positives: tp,
                false_positives: ranked.len() - tp,
                missed: class_targets.len() - tp,
            },
        );
    }
    let mean_ap = mean_of(&per_class_ap);
    EvalReport {
        task: format!("{mode:?}").to_lowercase(),
        fold: None,
        per_class_ap,
        mean_ap,
        counts,
    }
}

fn mean_of(per_class: &BTreeMap<usize, f64>) -> f64 {
    if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::InstrumentInstance;

    fn unit_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = unit_box(0.1, 0.1, 0.4, 0.4);
        let b = unit_box(0.6, 0.6, 0.9, 0.9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_offset_squares() {
        // Two 0.4-side squares offset by half a side: overlap 0.5·s², union 1.5·s².
        let a = unit_box(0.0, 0.0, 0.4, 0.4);
        let b = unit_box(0.2, 0.0, 0.6, 0.4);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_hand_cases_are_bit_exact() {
        // Single rounding via the exact-fraction path: these must equal the
        // literal spellings, not merely approximate them.
        assert_eq!(average_precision(&[true, false, true]), 5.0 / 6.0);
        assert_eq!(average_precision(&[true, true, false]), 1.0);
        assert_eq!(average_precision(&[false, true]), 0.5);
        // (1/1 + 2/3 + 3/4) / 3 = 29/36.
        assert_eq!(average_precision(&[true, false, true, true]), 29.0 / 36.0);
    }

    #[test]
    fn ap_long_ranking_fallback_matches_plain_sum() {
        // 41 positives spread over 121 ranks push the exact fraction past the
        // 53-bit window, exercising the compensated fallback; it must agree
        // with a plain running sum to float accuracy.
        let ranked: Vec<bool> = (0..121).map(|i| i % 3 == 0).collect();
        let positives = ranked.iter().filter(|&&r| r).count();
        let mut tp = 0usize;
        let mut reference = 0.0;
        for (rank, &rel) in ranked.iter().enumerate() {
            if rel {
                tp += 1;
                reference += tp as f64 / (rank + 1) as f64;
            }
        }
        reference /= positives as f64;
        assert!((average_precision(&ranked) - reference).abs() < 1e-12);
    }

    #[test]
    fn ranking_is_stable_under_ties() {
        let order = rank_descending(&[0.5, 0.9, 0.5, 0.7]);
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    fn frame_with(instances: Vec<InstrumentInstance>) -> KeyframeAnnotation {
        KeyframeAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            phase_id: 1,
            step_id: 1,
            instances,
            has_box_annotations: true,
        }
    }

    fn det(score0: f64, b: BoundingBox) -> DetectionPrediction {
        DetectionPrediction {
            video_id: "v".into(),
            frame_index: 0,
            bbox: b,
            scores: vec![score0],
        }
    }

    #[test]
    fn duplicate_detection_on_one_gt_is_tp_then_fp() {
        let b = unit_box(0.1, 0.1, 0.3, 0.3);
        let gt = frame_with(vec![InstrumentInstance {
            bbox: b,
            instrument_id: 0,
            action_ids: vec![0],
        }]);
        let preds = vec![det(0.9, b), det(0.8, b)];
        let report = detection_map(&preds, &[&gt], 1, 0.5, DetectionMode::Instrument);
        assert_eq!(report.mean_ap, 1.0);
        let c = &report.counts[&0];
        assert_eq!((c.true_positives, c.false_positives, c.missed), (1, 1, 0));
    }

    #[test]
    fn missed_gt_caps_detection_ap() {
        let b0 = unit_box(0.1, 0.1, 0.3, 0.3);
        let b1 = unit_box(0.6, 0.6, 0.8, 0.8);
        let gt = frame_with(vec![
            InstrumentInstance {
                bbox: b0,
                instrument_id: 0,
                action_ids: vec![0],
            },
            InstrumentInstance {
                bbox: b1,
                instrument_id: 0,
                action_ids: vec![0],
            },
        ]);
        // Only the first object is detected: precision 1 at rank 1, recall ½.
        let preds = vec![det(0.9, b0)];
        let report = detection_map(&preds, &[&gt], 1, 0.5, DetectionMode::Instrument);
        assert!((report.mean_ap - 0.5).abs() < 1e-12);
        assert_eq!(report.counts[&0].missed, 1);
    }

    #[test]
    fn iou_exactly_at_threshold_is_a_match() {
        // Boxes sharing exactly one-third IoU against threshold 1/3.
        let a = unit_box(0.0, 0.0, 0.4, 0.4);
        let b = unit_box(0.2, 0.0, 0.6, 0.4);
        let gt = frame_with(vec![InstrumentInstance {
            bbox: a,
            instrument_id: 0,
            action_ids: vec![0],
        }]);
        let preds = vec![det(0.9, b)];
        let thr = iou(&a, &b); // exactly at the boundary, ≥ keeps it
        let report = detection_map(&preds, &[&gt], 1, thr, DetectionMode::Instrument);
        assert_eq!(report.counts[&0].true_positives, 1);
    }

    #[test]
    fn action_mode_expands_multi_label_boxes() {
        let b = unit_box(0.1, 0.1, 0.3, 0.3);
        let gt = frame_with(vec![InstrumentInstance {
            bbox: b,
            instrument_id: 0,
            action_ids: vec![1, 3],
        }]);
        // A single detection scoring both labels correctly covers both
        // expanded targets.
        let pred = DetectionPrediction {
            video_id: "v".into(),
            frame_index: 0,
            bbox: b,
            scores: vec![0.0, 0.9, 0.0, 0.8],
        };
        let report = detection_map(&[pred], &[&gt], 4, 0.5, DetectionMode::Action);
        assert_eq!(report.per_class_ap.len(), 2);
        assert_eq!(report.mean_ap, 1.0);
    }

    #[test]
    fn frame_map_perfect_one_hot() {
        let gt0 = KeyframeAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            phase_id: 1,
            step_id: 1,
            instances: vec![],
            has_box_annotations: false,
        };
        let gt1 = KeyframeAnnotation {
            video_id: "v".into(),
            frame_index: 2,
            phase_id: 2,
            step_id: 3,
            instances: vec![],
            has_box_annotations: false,
        };
        let preds = vec![
            FramePrediction {
                video_id: "v".into(),
                frame_index: 0,
                scores: vec![0.0, 1.0, 0.0],
            },
            FramePrediction {
                video_id: "v".into(),
                frame_index: 2,
                scores: vec![0.0, 0.0, 1.0],
            },
        ];
        let report = frame_map(&preds, &[&gt0, &gt1], 3, FrameTask::Phase).unwrap();
        assert_eq!(report.mean_ap, 1.0);
        // Class 0 has no ground truth and must not appear.
        assert!(!report.per_class_ap.contains_key(&0));
    }

    #[test]
    fn frame_map_reports_missing_predictions() {
        let gt = KeyframeAnnotation {
            video_id: "v".into(),
            frame_index: 7,
            phase_id: 0,
            step_id: 0,
            instances: vec![],
            has_box_annotations: false,
        };
        let err = frame_map(&[], &[&gt], 2, FrameTask::Phase).unwrap_err();
        assert!(err.to_string().contains("v:7"));
    }
}
