//! Instrument detector: conv backbone pyramid, deformable-attention encoder
//! over multi-scale tokens, and a small query-based decoder with iterative
//! box refinement. Every decoder layer emits class logits and boxes; the
//! training loss supervises all layers, inference reads the last.

pub mod deform;
pub mod hungarian;
pub mod loss;

use crate::annotation::BoundingBox;
use crate::{Result, TapirError};
use ndarray::{Array2, ArrayD};
#[cfg(test)]
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use tapir_autograd::params::{Init, ParamStore, Session};
use tapir_autograd::Var;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Token width everywhere past the backbone.
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per head and level.
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub ffn_hidden: usize,
    /// Object classes; class `num_classes` is "no object".
    pub num_classes: usize,
    pub image_size: (usize, usize),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            points: 4,
            enc_layers: 2,
            dec_layers: 3,
            num_queries: 20,
            ffn_hidden: 128,
            num_classes: 7,
            image_size: (64, 64),
        }
    }
}

impl DetectorConfig {
    /// Pyramid level geometry: /4, /8, /16 of the input.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.image_size;
        vec![(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels % self.heads != 0 {
            return Err(TapirError::Validation(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        let (h, w) = self.image_size;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(TapirError::Validation(format!(
                "image size {h}x{w} must be divisible by 16"
            )));
        }
        if self.num_queries == 0 || self.dec_layers == 0 {
            return Err(TapirError::Validation("need queries and decoder layers".into()));
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore) {
        let c = self.channels;
        let convs = [
            ("det.backbone.c1", 3, 32),
            ("det.backbone.c2", 32, c),
            ("det.backbone.c3", c, c),
            ("det.backbone.c4", c, c),
        ];
        for (name, cin, cout) in convs {
            store.ensure(
                &format!("{name}.w"),
                &[9 * cin, cout],
                Init::XavierUniform { fan_in: 9 * cin, fan_out: cout },
            );
            store.ensure(&format!("{name}.b"), &[cout], Init::Zeros);
        }
        for (l, (h, w)) in self.level_shapes().iter().enumerate() {
            store.ensure(&format!("det.pos.l{l}"), &[h * w, c], Init::Normal { std: 0.02 });
        }
        let levels = self.level_shapes().len();
        for e in 0..self.enc_layers {
            deform::init_deform(store, &format!("det.enc{e}.attn"), c, self.heads, levels, self.points);
            init_ffn(store, &format!("det.enc{e}"), c, self.ffn_hidden);
            init_ln(store, &format!("det.enc{e}.ln1"), c);
            init_ln(store, &format!("det.enc{e}.ln2"), c);
        }
        store.ensure("det.query.content", &[self.num_queries, c], Init::Normal { std: 0.02 });
        store.ensure("det.query.pos", &[self.num_queries, c], Init::Normal { std: 0.02 });
        store.ensure("det.ref0.w", &[c, 4], Init::XavierUniform { fan_in: c, fan_out: 4 });
        store.ensure("det.ref0.b", &[4], Init::Zeros);
        for d in 0..self.dec_layers {
            let p = format!("det.dec{d}");
            for w in ["wq", "wk", "wv", "wo"] {
                store.ensure(
                    &format!("{p}.self.{w}"),
                    &[c, c],
                    Init::XavierUniform { fan_in: c, fan_out: c },
                );
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.ensure(&format!("{p}.self.{b}"), &[c], Init::Zeros);
            }
            deform::init_deform(store, &format!("{p}.cross"), c, self.heads, levels, self.points);
            init_ffn(store, &p, c, self.ffn_hidden);
            init_ln(store, &format!("{p}.ln1"), c);
            init_ln(store, &format!("{p}.ln2"), c);
            init_ln(store, &format!("{p}.ln3"), c);
            store.ensure(
                &format!("det.cls.l{d}.w"),
                &[c, self.num_classes + 1],
                Init::XavierUniform { fan_in: c, fan_out: self.num_classes + 1 },
            );
            store.ensure(&format!("det.cls.l{d}.b"), &[self.num_classes + 1], Init::Zeros);
            for (i, (fi, fo)) in [(c, c), (c, c), (c, 4)].iter().enumerate() {
                store.ensure(
                    &format!("det.box.l{d}.w{}", i + 1),
                    &[*fi, *fo],
                    Init::XavierUniform { fan_in: *fi, fan_out: *fo },
                );
                store.ensure(&format!("det.box.l{d}.b{}", i + 1), &[*fo], Init::Zeros);
            }
        }
    }
}

fn init_ffn(store: &mut ParamStore, prefix: &str, c: usize, hidden: usize) {
    store.ensure(
        &format!("{prefix}.ffn.w1"),
        &[c, hidden],
        Init::XavierUniform { fan_in: c, fan_out: hidden },
    );
    store.ensure(&format!("{prefix}.ffn.b1"), &[hidden], Init::Zeros);
    store.ensure(
        &format!("{prefix}.ffn.w2"),
        &[hidden, c],
        Init::XavierUniform { fan_in: hidden, fan_out: c },
    );
    store.ensure(&format!("{prefix}.ffn.b2"), &[c], Init::Zeros);
}

fn init_ln(store: &mut ParamStore, prefix: &str, c: usize) {
    store.ensure(&format!("{prefix}.g"), &[c], Init::Ones);
    store.ensure(&format!("{prefix}.b"), &[c], Init::Zeros);
}

fn linear(sess: &mut Session, x: Var, w: &str, b: &str) -> Var {
    let wv = sess.param(w);
    let bv = sess.param(b);
    let y = sess.tape.matmul(x, wv);
    sess.tape.add(y, bv)
}

fn layer_norm_p(sess: &mut Session, x: Var, prefix: &str) -> Var {
    let g = sess.param(&format!("{prefix}.g"));
    let b = sess.param(&format!("{prefix}.b"));
    sess.tape.layer_norm(x, g, b, LN_EPS)
}

fn ffn(sess: &mut Session, x: Var, prefix: &str) -> Var {
    let h = linear(sess, x, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"));
    let h = sess.tape.relu(h);
    linear(sess, h, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))
}

/// Plain multi-head attention (queries over keys/values, no pooling).
fn full_attention(sess: &mut Session, prefix: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Var {
    let c = sess.tape.shape(q_in)[1];
    let dh = c / heads;
    let q = linear(sess, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(sess, k_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(sess, v_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let nq = sess.tape.shape(q)[0];
    let nk = sess.tape.shape(k)[0];
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let ch = (h * dh, (h + 1) * dh);
        let qh = sess.tape.slice(q, &[(0, nq), ch]);
        let kh = sess.tape.slice(k, &[(0, nk), ch]);
        let vh = sess.tape.slice(v, &[(0, nk), ch]);
        let kt = sess.tape.transpose2(kh);
        let scores = sess.tape.matmul(qh, kt);
        let scores = sess.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = sess.tape.softmax_last(scores);
        outs.push(sess.tape.matmul(attn, vh));
    }
    let cat = sess.tape.concat(&outs, 1);
    linear(sess, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

pub struct LayerPrediction {
    /// (N, num_classes + 1) raw logits.
    pub class_logits: Var,
    /// (N, 4) boxes as (cx, cy, w, h) in [0, 1].
    pub boxes: Var,
}

pub struct DetectorOutput {
    pub layers: Vec<LayerPrediction>,
    /// (N, C) final decoder features — the per-box features consumed by the
    /// fused action head.
    pub decoder_features: Var,
    /// Values that the forward pass detached (refinement bases in logit
    /// space and the reference centers each layer sampled with). Gradient
    /// checks re-run the forward with these pinned so finite differences
    /// and backprop differentiate the same function.
    pub detached: DetachedRefs,
}

/// Stop-gradient state of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct DetachedRefs {
    /// Per decoder layer: (N, 4) inverse-sigmoid base of box refinement.
    pub bases: Vec<Array2<f64>>,
    /// Per decoder layer: (N, 2) sampling centers. Layer 0's entry is
    /// recorded but never pinned — its centers stay live so the initial
    /// reference projection receives gradient.
    pub centers: Vec<Array2<f64>>,
}

fn inv_sigmoid_clamped(x: f64) -> f64 {
    let x = x.clamp(1e-5, 1.0 - 1e-5);
    (x / (1.0 - x)).ln()
}

/// Run the detector on one `(H, W, 3)` image in [0, 1].
pub fn detector_forward(
    sess: &mut Session,
    config: &DetectorConfig,
    image: &ArrayD<f64>,
) -> Result<DetectorOutput> {
    forward_impl(sess, config, image, None)
}

/// Forward pass with the detached reference state pinned to recorded values
/// (finite-difference checks need the stop-gradient points held fixed).
pub fn detector_forward_pinned(
    sess: &mut Session,
    config: &DetectorConfig,
    image: &ArrayD<f64>,
    pinned: &DetachedRefs,
) -> Result<DetectorOutput> {
    forward_impl(sess, config, image, Some(pinned))
}

fn forward_impl(
    sess: &mut Session,
    config: &DetectorConfig,
    image: &ArrayD<f64>,
    pinned: Option<&DetachedRefs>,
) -> Result<DetectorOutput> {
    let expected = [config.image_size.0, config.image_size.1, 3];
    if image.shape() != expected {
        return Err(TapirError::Shape {
            expected: format!("{expected:?}"),
            got: format!("{:?}", image.shape()),
        });
    }
    let c = config.channels;
    let levels = config.level_shapes();
    let x = sess.constant(image.clone());

    // Backbone pyramid: stride-2 convs down to /4, /8, /16.
    let mut maps = Vec::with_capacity(3);
    let mut cur = x;
    for (i, name) in ["c1", "c2", "c3", "c4"].iter().enumerate() {
        let w = sess.param(&format!("det.backbone.{name}.w"));
        let b = sess.param(&format!("det.backbone.{name}.b"));
        cur = sess.tape.conv2d(cur, w, b, 3, 2, 1);
        cur = sess.tape.relu(cur);
        if i >= 1 {
            maps.push(cur);
        }
    }

    // Flatten levels into one token sequence.
    let mut flat_levels = Vec::with_capacity(3);
    for (l, &(h, w)) in levels.iter().enumerate() {
        let f = sess.tape.reshape(maps[l], &[h * w, c]);
        flat_levels.push(f);
    }
    let mut tokens = sess.tape.concat(&flat_levels, 0);
    let n_tokens: usize = levels.iter().map(|&(h, w)| h * w).sum();

    // Fixed reference point of each token: its own pixel center, normalized.
    let mut refs = Array2::zeros((n_tokens, 2));
    {
        let mut row = 0;
        for &(h, w) in &levels {
            for y in 0..h {
                for x in 0..w {
                    refs[[row, 0]] = (x as f64 + 0.5) / w as f64;
                    refs[[row, 1]] = (y as f64 + 0.5) / h as f64;
                    row += 1;
                }
            }
        }
    }
    let token_refs = sess.constant(refs.into_dyn());

    let pos_all = {
        let parts: Vec<Var> = (0..levels.len())
            .map(|l| sess.param(&format!("det.pos.l{l}")))
            .collect();
        sess.tape.concat(&parts, 0)
    };

    for e in 0..config.enc_layers {
        let q = sess.tape.add(tokens, pos_all);
        let value_maps: Vec<Var> = {
            let mut out = Vec::with_capacity(levels.len());
            let mut start = 0;
            for &(h, w) in &levels {
                let slice = sess.tape.slice(tokens, &[(start, start + h * w), (0, c)]);
                out.push(sess.tape.reshape(slice, &[h, w, c]));
                start += h * w;
            }
            out
        };
        let att = deform::deform_attention(
            sess,
            &format!("det.enc{e}.attn"),
            config.heads,
            config.points,
            q,
            token_refs,
            &value_maps,
        );
        let sum = sess.tape.add(tokens, att);
        tokens = layer_norm_p(sess, sum, &format!("det.enc{e}.ln1"));
        let f = ffn(sess, tokens, &format!("det.enc{e}"));
        let sum = sess.tape.add(tokens, f);
        tokens = layer_norm_p(sess, sum, &format!("det.enc{e}.ln2"));
    }

    // Final memory split back into per-level maps for the decoder.
    let memory_maps: Vec<Var> = {
        let mut out = Vec::with_capacity(levels.len());
        let mut start = 0;
        for &(h, w) in &levels {
            let slice = sess.tape.slice(tokens, &[(start, start + h * w), (0, c)]);
            out.push(sess.tape.reshape(slice, &[h, w, c]));
            start += h * w;
        }
        out
    };

    let mut tgt = sess.param("det.query.content");
    let qpos = sess.param("det.query.pos");
    let n = config.num_queries;

    // Initial reference boxes predicted from the query embedding. Gradients
    // reach ref0 through the first cross-attention's sampling locations;
    // box refinement always detaches its base.
    let ref0_lin = linear(sess, qpos, "det.ref0.w", "det.ref0.b");
    let ref0 = sess.tape.sigmoid(ref0_lin); // (N, 4)
    let ref0_centers = sess.tape.slice(ref0, &[(0, n), (0, 2)]);
    let mut ref_boxes_val: Array2<f64> = {
        let v = sess.tape.value(ref0);
        Array2::from_shape_fn((n, 4), |(i, j)| v[[i, j]])
    };

    let mut detached = DetachedRefs::default();
    let mut layers = Vec::with_capacity(config.dec_layers);
    for d in 0..config.dec_layers {
        let p = format!("det.dec{d}");
        let q = sess.tape.add(tgt, qpos);
        let sa = full_attention(sess, &format!("{p}.self"), q, q, tgt, config.heads);
        let sum = sess.tape.add(tgt, sa);
        tgt = layer_norm_p(sess, sum, &format!("{p}.ln1"));

        // Layer 0 samples with live initial references; later layers with
        // the previous layer's detached box centers.
        let centers_val = if let Some(pin) = pinned {
            pin.centers[d].clone()
        } else {
            Array2::from_shape_fn((n, 2), |(i, j)| ref_boxes_val[[i, j]])
        };
        detached.centers.push(centers_val.clone());
        let ref_centers = if d == 0 {
            ref0_centers
        } else {
            sess.constant(centers_val.into_dyn())
        };

        let qc = sess.tape.add(tgt, qpos);
        let ca = deform::deform_attention(
            sess,
            &format!("{p}.cross"),
            config.heads,
            config.points,
            qc,
            ref_centers,
            &memory_maps,
        );
        let sum = sess.tape.add(tgt, ca);
        tgt = layer_norm_p(sess, sum, &format!("{p}.ln2"));

        let f = ffn(sess, tgt, &p);
        let sum = sess.tape.add(tgt, f);
        tgt = layer_norm_p(sess, sum, &format!("{p}.ln3"));

        let class_logits = linear(sess, tgt, &format!("det.cls.l{d}.w"), &format!("det.cls.l{d}.b"));
        let h1 = linear(sess, tgt, &format!("det.box.l{d}.w1"), &format!("det.box.l{d}.b1"));
        let h1 = sess.tape.relu(h1);
        let h2 = linear(sess, h1, &format!("det.box.l{d}.w2"), &format!("det.box.l{d}.b2"));
        let h2 = sess.tape.relu(h2);
        let delta = linear(sess, h2, &format!("det.box.l{d}.w3"), &format!("det.box.l{d}.b3"));

        // Iterative refinement: logit-space correction over a detached base.
        let base_val = if let Some(pin) = pinned {
            pin.bases[d].clone()
        } else {
            Array2::from_shape_fn((n, 4), |(i, j)| inv_sigmoid_clamped(ref_boxes_val[[i, j]]))
        };
        detached.bases.push(base_val.clone());
        let base = sess.constant(base_val.into_dyn());
        let adjusted = sess.tape.add(base, delta);
        let boxes = sess.tape.sigmoid(adjusted);

        ref_boxes_val = {
            let v = sess.tape.value(boxes);
            Array2::from_shape_fn((n, 4), |(i, j)| v[[i, j]])
        };

        layers.push(LayerPrediction { class_logits, boxes });
    }

    Ok(DetectorOutput {
        layers,
        decoder_features: tgt,
        detached,
    })
}

/// One decoded detection in evaluation-friendly form.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: usize,
    /// Softmax probability of each real object class (no-object excluded).
    pub class_probs: Vec<f64>,
    /// Final-layer decoder feature for this query.
    pub feature: Vec<f64>,
}

/// Extract detections scoring at least `threshold`. Confidence is the
/// maximum softmax probability over real object classes (the no-object
/// class only soaks up probability mass).
pub fn decode_detections(
    sess: &Session,
    output: &DetectorOutput,
    config: &DetectorConfig,
    threshold: f64,
) -> Vec<Detection> {
    let last = output.layers.last().expect("decoder has layers");
    let logits = sess.tape.value(last.class_logits);
    let boxes = sess.tape.value(last.boxes);
    let feats = sess.tape.value(output.decoder_features);
    let n = config.num_queries;
    let kc = config.num_classes;
    let mut out = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..=kc).map(|j| logits[[i, j]]).collect();
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let class_probs: Vec<f64> = exps.iter().take(kc).map(|e| e / z).collect();
        let (mut best_c, mut best_p) = (0usize, -1.0f64);
        for (j, &p) in class_probs.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best_c = j;
            }
        }
        if best_p < threshold {
            continue;
        }
        let (cx, cy, w, h) = (boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]], boxes[[i, 3]]);
        let bbox = BoundingBox {
            x1: (cx - w / 2.0).clamp(0.0, 1.0),
            y1: (cy - h / 2.0).clamp(0.0, 1.0),
            x2: (cx + w / 2.0).clamp(0.0, 1.0),
            y2: (cy + h / 2.0).clamp(0.0, 1.0),
        };
        out.push(Detection {
            bbox,
            score: best_p,
            class_id: best_c,
            class_probs,
            feature: (0..feats.shape()[1]).map(|j| feats[[i, j]]).collect(),
        });
    }
    out
}
