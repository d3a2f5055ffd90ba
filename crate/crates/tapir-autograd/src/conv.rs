//! 2-D convolution via im2col, for the detector backbone.
//!
//! Layout convention: images and feature maps are `(H, W, C)`; weights are
//! `(kh * kw * c_in, c_out)` so the forward pass is a single matrix product.

use crate::{as2, Op, Tape, Var};
use ndarray::{ArrayD, IxDyn};

impl Tape {
    /// Convolve `(H, W, Cin)` with zero padding. Weight shape
    /// `(kh * kw * Cin, Cout)`, bias `(Cout,)`; output `(H', W', Cout)` with
    /// `H' = (H + 2 pad - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "conv2d expects (H, W, C)");
        let (h, wd, c_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let wv = as2(self.value(w));
        assert_eq!(
            wv.shape()[0],
            kernel * kernel * c_in,
            "conv2d weight rows must be kh*kw*c_in"
        );
        let c_out = wv.shape()[1];
        assert!(h + 2 * pad >= kernel && wd + 2 * pad >= kernel, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (wd + 2 * pad - kernel) / stride + 1;

        let cols = im2col(xv, kernel, stride, pad, oh, ow);
        let cols2 = as2(&cols);
        let mut out = cols2.dot(&wv); // (oh*ow, c_out)
        let bv = self.value(b);
        for mut row in out.rows_mut() {
            for (o, &bias) in row.iter_mut().zip(bv.iter()) {
                *o += bias;
            }
        }
        let out = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&[oh, ow, c_out]))
            .unwrap();
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }
}

/// Unfold `(H, W, C)` into `(oh*ow, k*k*C)` patch rows with zero padding.
fn im2col(x: &ArrayD<f64>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> ArrayD<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = ArrayD::<f64>::zeros(IxDyn(&[oh * ow, k * k * c]));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue; // zero padding
                    }
                    let base = (ky * k + kx) * c;
                    for ic in 0..c {
                        cols[[row, base + ic]] = x[[iy as usize, ix as usize, ic]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter column gradients back onto the padded input (transpose of im2col).
fn col2im(
    gcols: &ndarray::ArrayView2<'_, f64>,
    shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<f64> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * c;
                    for ic in 0..c {
                        gx[[iy as usize, ix as usize, ic]] += gcols[[row, base + ic]];
                    }
                }
            }
        }
    }
    gx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    cols: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    grads: &mut [Option<ArrayD<f64>>],
) {
    let (oh, ow, c_out) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    let g2 = gout
        .view()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[oh * ow, c_out]))
        .unwrap();
    let g2v = as2(&g2);
    let colsv = as2(cols);
    let wshape = tape.shape(w).to_vec();
    let c_in = tape.shape(x)[2];
    let k = ((wshape[0] / c_in) as f64).sqrt().round() as usize;

    if tape.nodes[w.0].requires_grad {
        let gw = colsv.t().dot(&g2v).into_dyn();
        tape.accum(grads, w, gw);
    }
    if tape.nodes[b.0].requires_grad {
        let gb = g2v.sum_axis(ndarray::Axis(0)).into_dyn();
        tape.accum(grads, b, gb);
    }
    if tape.nodes[x.0].requires_grad {
        let wv = as2(tape.value(w));
        let gcols = g2v.dot(&wv.t());
        let gx = col2im(&gcols.view(), tape.shape(x), k, stride, pad, oh, ow);
        tape.accum(grads, x, gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = w.shape()[1];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[oh, ow, c_out]));
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..c_out {
                    let mut acc = b[[oc]];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..c_in {
                                acc += x[[iy as usize, ix as usize, ic]]
                                    * w[[(ky * k + kx) * c_in + ic, oc]];
                            }
                        }
                    }
                    out[[oy, ox, oc]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let x = ArrayD::from_shape_fn(IxDyn(&[5, 6, 3]), |_| rng.gen_range(-1.0..1.0));
        let w = ArrayD::from_shape_fn(IxDyn(&[3 * 3 * 3, 4]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[4]), |_| rng.gen_range(-1.0..1.0));
        let expected = conv_naive(&x, &w, &b, 3, 1, 1);

        let mut t = Tape::new();
        let xv = t.leaf(x);
        let wv = t.leaf(w);
        let bv = t.leaf(b);
        let y = t.conv2d(xv, wv, bv, 3, 1, 1);
        let diff = (t.value(y) - &expected).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn strided_conv_shape() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[8, 8, 3])));
        let w = t.constant(ArrayD::zeros(IxDyn(&[4 * 4 * 3, 16])));
        let b = t.constant(ArrayD::zeros(IxDyn(&[16])));
        let y = t.conv2d(x, w, b, 4, 4, 0);
        assert_eq!(t.shape(y), &[2, 2, 16]);
    }
}
