//! Bilinear point sampling with gradients for both the feature map and the
//! sampling locations. Out-of-bounds lattice corners contribute zeros.

use crate::{Op, Tape, Var};
use ndarray::{ArrayD, IxDyn};

impl Tape {
    /// Sample a `(H, W, C)` map at continuous pixel coordinates `locs` of shape
    /// `(P, 2)` holding `(x, y)` pairs; returns `(P, C)`.
    ///
    /// Coordinates index pixel centers directly: `x = 0` is the center of the
    /// first column. Corners that fall outside the map act as zeros, so samples
    /// fade smoothly to zero past the border.
    pub fn bilinear_sample(&mut self, map: Var, locs: Var) -> Var {
        let mv = self.value(map);
        let lv = self.value(locs);
        assert_eq!(mv.ndim(), 3, "bilinear_sample expects (H, W, C) map");
        assert_eq!(lv.ndim(), 2, "bilinear_sample expects (P, 2) locations");
        assert_eq!(lv.shape()[1], 2, "locations must be (x, y) pairs");
        let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let p = lv.shape()[0];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[p, c]));
        for i in 0..p {
            let x = lv[[i, 0]];
            let y = lv[[i, 1]];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let iy = y0 as isize + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let ix = x0 as isize + dx;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let weight = wx * wy;
                    for ic in 0..c {
                        out[[i, ic]] += weight * mv[[iy as usize, ix as usize, ic]];
                    }
                }
            }
        }
        let rg = self.nodes[map.0].requires_grad || self.nodes[locs.0].requires_grad;
        self.push(out, Op::BilinearSample { map, locs }, rg)
    }
}

pub(crate) fn bilinear_backward(
    tape: &Tape,
    map: Var,
    locs: Var,
    gout: &ArrayD<f64>,
    grads: &mut [Option<ArrayD<f64>>],
) {
    let mv = tape.value(map);
    let lv = tape.value(locs);
    let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
    let p = lv.shape()[0];
    let need_map = tape.nodes[map.0].requires_grad;
    let need_locs = tape.nodes[locs.0].requires_grad;
    let mut gmap = if need_map {
        Some(ArrayD::<f64>::zeros(IxDyn(&[h, w, c])))
    } else {
        None
    };
    let mut glocs = if need_locs {
        Some(ArrayD::<f64>::zeros(IxDyn(&[p, 2])))
    } else {
        None
    };

    for i in 0..p {
        let x = lv[[i, 0]];
        let y = lv[[i, 1]];
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        // corner values (zero outside)
        let fetch = |iy: isize, ix: isize, ic: usize| -> f64 {
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                0.0
            } else {
                mv[[iy as usize, ix as usize, ic]]
            }
        };
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ic in 0..c {
            let go = gout[[i, ic]];
            if go == 0.0 && !need_map {
                continue;
            }
            let v00 = fetch(y0 as isize, x0 as isize, ic);
            let v01 = fetch(y0 as isize, x0 as isize + 1, ic);
            let v10 = fetch(y0 as isize + 1, x0 as isize, ic);
            let v11 = fetch(y0 as isize + 1, x0 as isize + 1, ic);
            if need_locs {
                // d/dx = (1-fy)(v01-v00) + fy(v11-v10); d/dy analogous
                gx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if let Some(gm) = gmap.as_mut() {
                for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    let iy = y0 as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let ix = x0 as isize + dx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gm[[iy as usize, ix as usize, ic]] += go * wx * wy;
                    }
                }
            }
        }
        if let Some(gl) = glocs.as_mut() {
            gl[[i, 0]] = gx;
            gl[[i, 1]] = gy;
        }
    }
    if let Some(gm) = gmap {
        tape.accum(grads, map, gm);
    }
    if let Some(gl) = glocs {
        tape.accum(grads, locs, gl);
    }
}
