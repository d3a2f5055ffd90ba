//! Softmax, layer normalization and classification losses as tape ops.

use crate::{sigmoid, Op, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};

impl Tape {
    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = softmax_forward(self.value(a));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SoftmaxLast(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let v = log_softmax_forward(self.value(a));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::LogSoftmaxLast(a), rg)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().expect("layer_norm: rank >= 1") as f64;
        let mean = xv.mean_axis(Axis(xv.ndim() - 1)).unwrap();
        let centered = xv - &mean.clone().insert_axis(Axis(xv.ndim() - 1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(xv.ndim() - 1)) / k;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let normed = &centered * &inv_std.clone().insert_axis(Axis(xv.ndim() - 1));
        let out = &normed * &self.value(gamma).view() + &self.value(beta).view();
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        )
    }

    /// Per-row cross-entropy from logits `(n, k)` against class indices; returns `(n,)`.
    pub fn ce_with_logits(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "ce_with_logits expects (n, k) logits");
        assert_eq!(lv.shape()[0], targets.len(), "ce_with_logits: target count");
        let ls = log_softmax_forward(lv);
        let losses: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -ls[[i, t]])
            .collect();
        let v = ArrayD::from_shape_vec(IxDyn(&[targets.len()]), losses).unwrap();
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            v,
            Op::CeWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Elementwise binary cross-entropy from logits; stable formulation.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &ArrayD<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce_with_logits: shape");
        let v = ndarray::Zip::from(lv)
            .and(targets)
            .map_collect(|&x, &t| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln());
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            v,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        )
    }
}

pub(crate) fn softmax_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let mx = x.map_axis(Axis(last), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let shifted = x - &mx.insert_axis(Axis(last));
    let e = shifted.mapv(f64::exp);
    let denom = e.sum_axis(Axis(last)).insert_axis(Axis(last));
    &e / &denom
}

pub(crate) fn log_softmax_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let mx = x.map_axis(Axis(last), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let shifted = x - &mx.insert_axis(Axis(last));
    let lse = shifted
        .mapv(f64::exp)
        .sum_axis(Axis(last))
        .mapv(f64::ln)
        .insert_axis(Axis(last));
    &shifted - &lse
}

pub(crate) fn softmax_backward(s: &ArrayD<f64>, gout: &ArrayD<f64>) -> ArrayD<f64> {
    let last = s.ndim() - 1;
    let dot = (gout * s).sum_axis(Axis(last)).insert_axis(Axis(last));
    s * &(gout - &dot)
}

pub(crate) fn log_softmax_backward(ls: &ArrayD<f64>, gout: &ArrayD<f64>) -> ArrayD<f64> {
    let last = ls.ndim() - 1;
    let soft = ls.mapv(f64::exp);
    let gsum = gout.sum_axis(Axis(last)).insert_axis(Axis(last));
    gout - &(&soft * &gsum)
}

pub(crate) fn layer_norm_backward(
    x: &ArrayD<f64>,
    gamma: &ArrayD<f64>,
    mean: &ArrayD<f64>,
    inv_std: &ArrayD<f64>,
    gout: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let last = x.ndim() - 1;
    let k = x.shape()[last] as f64;
    let centered = x - &mean.clone().insert_axis(Axis(last));
    let is = inv_std.clone().insert_axis(Axis(last));
    let normed = &centered * &is;

    // reduce over all leading axes for the affine parameter gradients
    let gnorm_g = gout * &normed;
    let mut gg = gnorm_g.clone();
    let mut gb = gout.clone();
    while gg.ndim() > gamma.ndim() {
        gg = gg.sum_axis(Axis(0));
        gb = gb.sum_axis(Axis(0));
    }

    let gy = gout * &gamma.view();
    let sum_gy = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
    let sum_gy_norm = (&gy * &normed).sum_axis(Axis(last)).insert_axis(Axis(last));
    let gx = (&gy - &(&sum_gy / k) - &(&normed * &sum_gy_norm / k)) * &is;
    (gx, gg, gb)
}

pub(crate) fn ce_backward(
    logits: &ArrayD<f64>,
    targets: &[usize],
    gout: &ArrayD<f64>,
) -> ArrayD<f64> {
    let mut g = softmax_forward(logits);
    for (i, &t) in targets.iter().enumerate() {
        g[[i, t]] -= 1.0;
    }
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let go = gout[[i]];
        row.mapv_inplace(|v| v * go);
    }
    g
}

#[allow(unused)]
pub(crate) fn sigmoid_arr(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use ndarray::arr2;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let s = t.softmax_last(a);
        for row in t.value(s).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_matches_manual() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[0.0, 0.0]]).into_dyn());
        let l = t.ce_with_logits(a, &[0]);
        assert!((t.value(l)[[0]] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_extremes() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[20.0, -20.0]]).into_dyn());
        let targets = arr2(&[[1.0, 0.0]]).into_dyn();
        let l = t.bce_with_logits(a, &targets);
        assert!(t.value(l).iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0, 3.0, 4.0]]).into_dyn());
        let g = t.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[4]), 1.0));
        let b = t.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[4])));
        let y = t.layer_norm(x, g, b, 1e-6);
        let yv = t.value(y);
        assert!(yv.sum().abs() < 1e-9);
        let var = yv.mapv(|v| v * v).sum() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}
