//! Strided average pooling over spatiotemporal token grids.

use crate::{Op, Tape, Var};
use ndarray::{ArrayD, IxDyn};

impl Tape {
    /// Average-pool a `(T, H, W, C)` grid with non-overlapping windows equal to
    /// the stride in each spatiotemporal dimension. Dimensions must be divisible
    /// by their stride.
    pub fn avg_pool_grid(&mut self, x: Var, stride: [usize; 3]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "avg_pool_grid expects (T, H, W, C)");
        let (t, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        for (dim, s) in [(t, stride[0]), (h, stride[1]), (w, stride[2])] {
            assert!(s >= 1 && dim % s == 0, "pool stride {s} must divide dim {dim}");
        }
        let (ot, oh, ow) = (t / stride[0], h / stride[1], w / stride[2]);
        let norm = 1.0 / (stride[0] * stride[1] * stride[2]) as f64;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[ot, oh, ow, c]));
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    let (pt, ph, pw) = (it / stride[0], ih / stride[1], iw / stride[2]);
                    for ic in 0..c {
                        out[[pt, ph, pw, ic]] += xv[[it, ih, iw, ic]] * norm;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::AvgPoolGrid { x, stride }, rg)
    }
}

pub(crate) fn avg_pool_grid_backward(
    tape: &Tape,
    x: Var,
    stride: [usize; 3],
    gout: &ArrayD<f64>,
    grads: &mut [Option<ArrayD<f64>>],
) {
    let shape = tape.shape(x).to_vec();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let norm = 1.0 / (stride[0] * stride[1] * stride[2]) as f64;
    let mut g = ArrayD::<f64>::zeros(IxDyn(&shape));
    for it in 0..t {
        for ih in 0..h {
            for iw in 0..w {
                let (pt, ph, pw) = (it / stride[0], ih / stride[1], iw / stride[2]);
                for ic in 0..c {
                    g[[it, ih, iw, ic]] = gout[[pt, ph, pw, ic]] * norm;
                }
            }
        }
    }
    tape.accum(grads, x, g);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_identity_when_stride_one() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2, 2, 1]), (0..8).map(|v| v as f64).collect()).unwrap());
        let y = t.avg_pool_grid(x, [1, 1, 1]);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn pool_averages_windows() {
        let mut t = Tape::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = t.avg_pool_grid(x, [1, 2, 2]);
        assert_eq!(t.value(y)[[0, 0, 0, 0]], 2.5);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
