//! Set-based detection loss: optimal query↔ground-truth matching followed by
//! class / L1 / generalized-IoU terms, applied to every decoder layer.
//!
//! Coefficients: matching cost 2·class + 5·L1 + 2·(−GIoU); training loss
//! 1·CE + 5·L1 + 2·(1−GIoU), box terms normalized by the number of ground
//! truth boxes. Unmatched queries train toward "no object" with weight 0.1
//! so the many background queries don't drown the rare instrument ones.

use super::hungarian::min_cost_assignment;
use super::{DetectorOutput, LayerPrediction};
use ndarray::Array2;
use tapir_autograd::params::Session;
use tapir_autograd::Var;

pub const COST_CLASS: f64 = 2.0;
pub const COST_L1: f64 = 5.0;
pub const COST_GIOU: f64 = 2.0;
pub const LOSS_CLASS: f64 = 1.0;
pub const LOSS_L1: f64 = 5.0;
pub const LOSS_GIOU: f64 = 2.0;
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

/// One annotated box: class index and (cx, cy, w, h) in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// (cx, cy, w, h) -> (x1, y1, x2, y2).
pub fn corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Plain-value generalized IoU between two (cx, cy, w, h) boxes.
pub fn giou_value(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ac = corners(a);
    let bc = corners(b);
    let iw = (ac[2].min(bc[2]) - ac[0].max(bc[0])).max(0.0);
    let ih = (ac[3].min(bc[3]) - ac[1].max(bc[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2]).max(0.0) * (a[3]).max(0.0);
    let area_b = (b[2]).max(0.0) * (b[3]).max(0.0);
    let union = area_a + area_b - inter;
    let hull_w = ac[2].max(bc[2]) - ac[0].min(bc[0]);
    let hull_h = ac[3].max(bc[3]) - ac[1].min(bc[1]);
    let hull = hull_w * hull_h;
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    let iou = inter / union;
    iou - (hull - union) / hull
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

/// Optimal assignment for one layer from prediction *values*; gradients are
/// not needed for matching. Returns (query, gt_index) pairs.
pub fn match_layer(
    class_probs: &Array2<f64>,
    boxes: &Array2<f64>,
    gt: &[GtBox],
) -> Vec<(usize, usize)> {
    if gt.is_empty() {
        return vec![];
    }
    let n = boxes.nrows();
    let mut cost = Array2::zeros((n, gt.len()));
    for q in 0..n {
        let pb = [boxes[[q, 0]], boxes[[q, 1]], boxes[[q, 2]], boxes[[q, 3]]];
        for (j, g) in gt.iter().enumerate() {
            let l1: f64 = pb
                .iter()
                .zip(g.bbox.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            cost[[q, j]] = COST_CLASS * (-class_probs[[q, g.class_id]])
                + COST_L1 * l1
                + COST_GIOU * (-giou_value(pb, g.bbox));
        }
    }
    min_cost_assignment(&cost).pairs
}

/// Tape-side GIoU for one matched (1,4) prediction against a constant gt.
fn giou_on_tape(sess: &mut Session, pred_box: Var, gt: [f64; 4]) -> Var {
    let t = &mut sess.tape;
    let cx = t.slice(pred_box, &[(0, 1), (0, 1)]);
    let cy = t.slice(pred_box, &[(0, 1), (1, 2)]);
    let w = t.slice(pred_box, &[(0, 1), (2, 3)]);
    let h = t.slice(pred_box, &[(0, 1), (3, 4)]);
    let hw = t.scale(w, 0.5);
    let hh = t.scale(h, 0.5);
    let px1 = t.sub(cx, hw);
    let px2 = t.add(cx, hw);
    let py1 = t.sub(cy, hh);
    let py2 = t.add(cy, hh);
    let g = corners(gt);
    let gx1 = sess.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), g[0]));
    let gy1 = sess.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), g[1]));
    let gx2 = sess.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), g[2]));
    let gy2 = sess.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), g[3]));
    let t = &mut sess.tape;

    let ix1 = t.max_elem(px1, gx1);
    let iy1 = t.max_elem(py1, gy1);
    let ix2 = t.min_elem(px2, gx2);
    let iy2 = t.min_elem(py2, gy2);
    let iw = t.sub(ix2, ix1);
    let iw = t.relu(iw);
    let ih = t.sub(iy2, iy1);
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih);

    let area_p = t.mul(w, h);
    let ga = (g[2] - g[0]) * (g[3] - g[1]);
    let area_sum = t.add_scalar(area_p, ga);
    let union = t.sub(area_sum, inter);

    let hx1 = t.min_elem(px1, gx1);
    let hy1 = t.min_elem(py1, gy1);
    let hx2 = t.max_elem(px2, gx2);
    let hy2 = t.max_elem(py2, gy2);
    let hw_ = t.sub(hx2, hx1);
    let hh_ = t.sub(hy2, hy1);
    let hull = t.mul(hw_, hh_);

    let iou = t.div(inter, union);
    let excess = t.sub(hull, union);
    let frac = t.div(excess, hull);
    t.sub(iou, frac)
}

pub struct LayerLoss {
    pub matching: Vec<(usize, usize)>,
    pub class_loss: f64,
    pub l1_loss: f64,
    pub giou_loss: f64,
}

pub struct DetectionLoss {
    pub total: Var,
    pub per_layer: Vec<LayerLoss>,
}

/// Loss for one layer given a fixed matching. Returns the scalar Var plus
/// the value breakdown.
fn layer_loss_fixed(
    sess: &mut Session,
    layer: &LayerPrediction,
    gt: &[GtBox],
    matching: &[(usize, usize)],
    num_classes: usize,
) -> (Var, LayerLoss) {
    let n = sess.tape.shape(layer.class_logits)[0];
    let no_object = num_classes;
    let mut targets = vec![no_object; n];
    let mut weights = vec![NO_OBJECT_WEIGHT; n];
    for &(q, j) in matching {
        targets[q] = gt[j].class_id;
        weights[q] = 1.0;
    }
    let weight_sum: f64 = weights.iter().sum();
    let ce_rows = sess.tape.ce_with_logits(layer.class_logits, &targets);
    let wconst = sess.constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[n]), weights).unwrap(),
    );
    let weighted = sess.tape.mul(ce_rows, wconst);
    let ce_sum = sess.tape.sum_all(weighted);
    let class_term = sess.tape.scale(ce_sum, LOSS_CLASS / weight_sum);

    let num_boxes = gt.len().max(1) as f64;
    let mut total = class_term;
    let mut l1_val = 0.0;
    let mut giou_val_sum = 0.0;
    if !matching.is_empty() {
        let mut l1_acc: Option<Var> = None;
        let mut giou_acc: Option<Var> = None;
        for &(q, j) in matching {
            let pb = sess.tape.slice(layer.boxes, &[(q, q + 1), (0, 4)]);
            let gt_const = sess.constant(
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 4]), gt[j].bbox.to_vec())
                    .unwrap(),
            );
            let diff = sess.tape.sub(pb, gt_const);
            let diff = sess.tape.abs(diff);
            let l1 = sess.tape.sum_all(diff);
            l1_acc = Some(match l1_acc {
                None => l1,
                Some(a) => sess.tape.add(a, l1),
            });
            let giou = giou_on_tape(sess, pb, gt[j].bbox);
            let one_minus = {
                let neg = sess.tape.neg(giou);
                sess.tape.add_scalar(neg, 1.0)
            };
            let one_minus = sess.tape.sum_all(one_minus);
            giou_acc = Some(match giou_acc {
                None => one_minus,
                Some(a) => sess.tape.add(a, one_minus),
            });
        }
        let l1_term = sess.tape.scale(l1_acc.unwrap(), LOSS_L1 / num_boxes);
        let giou_term = sess.tape.scale(giou_acc.unwrap(), LOSS_GIOU / num_boxes);
        l1_val = sess.tape.value(l1_term)[[]];
        giou_val_sum = sess.tape.value(giou_term)[[]];
        let t2 = sess.tape.add(total, l1_term);
        total = sess.tape.add(t2, giou_term);
    }
    let class_val = sess.tape.value(class_term)[[]];
    (
        total,
        LayerLoss {
            matching: matching.to_vec(),
            class_loss: class_val,
            l1_loss: l1_val,
            giou_loss: giou_val_sum,
        },
    )
}

/// Compute optimal matchings per layer from current values.
pub fn compute_matchings(
    sess: &Session,
    output: &DetectorOutput,
    gt: &[GtBox],
    num_classes: usize,
) -> Vec<Vec<(usize, usize)>> {
    output
        .layers
        .iter()
        .map(|layer| {
            let logits = sess.tape.value(layer.class_logits);
            let n = logits.shape()[0];
            let l2 = Array2::from_shape_fn((n, num_classes + 1), |(i, j)| logits[[i, j]]);
            let probs = softmax_rows(&l2);
            let bv = sess.tape.value(layer.boxes);
            let boxes = Array2::from_shape_fn((n, 4), |(i, j)| bv[[i, j]]);
            match_layer(&probs, &boxes, gt)
        })
        .collect()
}

/// Full detection loss with the matching supplied (used by gradient checks,
/// where the assignment must stay fixed while parameters are perturbed).
pub fn detection_loss_with_matchings(
    sess: &mut Session,
    output: &DetectorOutput,
    gt: &[GtBox],
    matchings: &[Vec<(usize, usize)>],
    num_classes: usize,
) -> DetectionLoss {
    assert_eq!(matchings.len(), output.layers.len());
    let mut per_layer = Vec::with_capacity(output.layers.len());
    let mut total: Option<Var> = None;
    for (layer, matching) in output.layers.iter().zip(matchings) {
        let (term, ll) = layer_loss_fixed(sess, layer, gt, matching, num_classes);
        per_layer.push(ll);
        total = Some(match total {
            None => term,
            Some(a) => sess.tape.add(a, term),
        });
    }
    DetectionLoss {
        total: total.expect("at least one layer"),
        per_layer,
    }
}

/// Standard entry point: match each layer optimally, then apply the loss.
pub fn detection_loss(
    sess: &mut Session,
    output: &DetectorOutput,
    gt: &[GtBox],
    num_classes: usize,
) -> DetectionLoss {
    let matchings = compute_matchings(sess, output, gt, num_classes);
    detection_loss_with_matchings(sess, output, gt, &matchings, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detector_forward, DetectorConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use tapir_autograd::params::{rng_for, AdamW, ParamStore};

    #[test]
    fn giou_of_identical_boxes_is_one() {
        let b = [0.5, 0.5, 0.4, 0.2];
        assert!((giou_value(b, b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_of_distant_boxes_is_negative() {
        let a = [0.1, 0.1, 0.1, 0.1];
        let b = [0.9, 0.9, 0.1, 0.1];
        assert!(giou_value(a, b) < -0.5);
    }

    #[test]
    fn giou_known_half_overlap() {
        // Unit-height boxes [0,0.2]×[0,1] and [0.1,0.3]×[0,1]:
        // inter 0.1, union 0.3, hull 0.3 → GIoU = IoU = 1/3.
        let a = [0.1, 0.5, 0.2, 1.0];
        let b = [0.2, 0.5, 0.2, 1.0];
        assert!((giou_value(a, b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tape_giou_matches_value_giou() {
        let store = ParamStore::new(0);
        let mut rng = rng_for(4, "giou");
        for _ in 0..50 {
            let p = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ];
            let g = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ];
            let mut sess = Session::new(&store);
            let pv = sess.constant(
                ArrayD::from_shape_vec(IxDyn(&[1, 4]), p.to_vec()).unwrap(),
            );
            let gv = giou_on_tape(&mut sess, pv, g);
            let got = sess.tape.value(gv)[[0, 0]];
            assert!((got - giou_value(p, g)).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_prefers_overlapping_box_and_right_class() {
        // Two queries: one sits on the gt with the right class, the other far
        // away; matching must pick query 0.
        let probs = ndarray::arr2(&[[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]]);
        let boxes = ndarray::arr2(&[[0.3, 0.3, 0.2, 0.2], [0.8, 0.8, 0.1, 0.1]]);
        let gt = [GtBox { class_id: 0, bbox: [0.3, 0.3, 0.2, 0.2] }];
        let pairs = match_layer(&probs, &boxes, &gt);
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn empty_gt_gives_pure_background_loss() {
        let config = DetectorConfig {
            enc_layers: 1,
            dec_layers: 1,
            ..DetectorConfig::default()
        };
        let mut store = ParamStore::new(2);
        config.init_params(&mut store);
        let mut rng = rng_for(1, "img");
        let image = ArrayD::from_shape_fn(IxDyn(&[64, 64, 3]), |_| rng.gen_range(0.0..1.0));
        let mut sess = Session::new(&store);
        let out = detector_forward(&mut sess, &config, &image).unwrap();
        let loss = detection_loss(&mut sess, &out, &[], 7);
        assert!(loss.per_layer[0].matching.is_empty());
        assert_eq!(loss.per_layer[0].l1_loss, 0.0);
        assert_eq!(loss.per_layer[0].giou_loss, 0.0);
        assert!(loss.per_layer[0].class_loss > 0.0);
    }

    #[test]
    fn class_weighting_at_uniform_logits() {
        // All-zero logits, N=4 queries, 1 matched: every row's CE is ln(8);
        // weighted mean = ln(8) regardless of weights — then check a skewed
        // case where only weights differ.
        let store = ParamStore::new(0);
        let mut sess = Session::new(&store);
        let logits = sess.constant(ArrayD::zeros(IxDyn(&[4, 8])));
        let boxes = sess.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 0.5));
        let layer = LayerPrediction { class_logits: logits, boxes };
        let gt = [GtBox { class_id: 2, bbox: [0.5, 0.5, 0.5, 0.5] }];
        let (_, ll) = layer_loss_fixed(&mut sess, &layer, &gt, &[(1, 0)], 7);
        let expect = (8.0f64).ln();
        assert!((ll.class_loss - expect).abs() < 1e-9, "{}", ll.class_loss);
        // matched box identical to gt: no box penalty beyond giou=1 → 0
        assert!(ll.l1_loss.abs() < 1e-12);
        assert!(ll.giou_loss.abs() < 1e-12);
    }

    #[test]
    fn detection_loss_gradients_match_fd_with_fixed_matching() {
        let config = DetectorConfig {
            channels: 16,
            heads: 2,
            points: 2,
            enc_layers: 1,
            dec_layers: 2,
            num_queries: 6,
            ffn_hidden: 32,
            num_classes: 7,
            image_size: (32, 32),
        };
        let mut store = ParamStore::new(13);
        config.init_params(&mut store);
        let mut rng = rng_for(13, "img");
        let image = ArrayD::from_shape_fn(IxDyn(&[32, 32, 3]), |_| rng.gen_range(0.0..1.0));
        let gt = [
            GtBox { class_id: 1, bbox: [0.3, 0.4, 0.2, 0.2] },
            GtBox { class_id: 4, bbox: [0.7, 0.6, 0.15, 0.25] },
        ];

        // Pin both discrete/stop-gradient elements — the assignment and the
        // detached reference state — so finite differences and backprop see
        // the same smooth function.
        let (analytic, matchings, pinned) = {
            let mut sess = Session::new(&store);
            let out = detector_forward(&mut sess, &config, &image).unwrap();
            let matchings = compute_matchings(&sess, &out, &gt, 7);
            let loss = detection_loss_with_matchings(&mut sess, &out, &gt, &matchings, 7);
            (sess.grads(loss.total), matchings, out.detached)
        };
        let loss_of = |store: &ParamStore| {
            let mut sess = Session::new(store);
            let out =
                crate::detector::detector_forward_pinned(&mut sess, &config, &image, &pinned)
                    .unwrap();
            let loss = detection_loss_with_matchings(&mut sess, &out, &gt, &matchings, 7);
            sess.tape.value(loss.total)[[]]
        };
        let checks =
            tapir_autograd::gradcheck::check_gradients(&mut store, &analytic, loss_of, 1e-5, 2);
        for check in checks {
            assert!(
                check.max_rel_err < 1e-3,
                "{}: {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn loss_halves_when_overfitting_one_image() {
        // Tiny detector, one image, a few dozen optimizer steps: the loss
        // must drop below half its initial value.
        let config = DetectorConfig {
            channels: 16,
            heads: 2,
            points: 2,
            enc_layers: 1,
            dec_layers: 2,
            num_queries: 6,
            ffn_hidden: 32,
            num_classes: 7,
            image_size: (32, 32),
        };
        let mut store = ParamStore::new(21);
        config.init_params(&mut store);
        let mut rng = rng_for(21, "img");
        let image = ArrayD::from_shape_fn(IxDyn(&[32, 32, 3]), |_| rng.gen_range(0.0..1.0));
        let gt = [GtBox { class_id: 3, bbox: [0.4, 0.5, 0.25, 0.3] }];

        let mut opt = AdamW::new(1e-4);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let (grads, value) = {
                let mut sess = Session::new(&store);
                let out = detector_forward(&mut sess, &config, &image).unwrap();
                let loss = detection_loss(&mut sess, &out, &gt, 7);
                (sess.grads(loss.total), sess.tape.value(loss.total)[[]])
            };
            if first.is_none() {
                first = Some(value);
            }
            last = value;
            opt.step(&mut store, &grads, 2e-3);
        }
        let first = first.unwrap();
        assert!(
            last < 0.5 * first,
            "loss went {first} -> {last}, expected at least halving"
        );
    }
}
