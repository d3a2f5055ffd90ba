//! Multi-scale deformable attention.
//!
//! Each query looks at K learned sampling points per feature level and head,
//! placed relative to its reference point; attention weights are a softmax
//! over all (level, point) slots of a head. Cost is linear in the number of
//! sampled points instead of quadratic in token count.
//!
//! Channel layouts (frozen — the oracle test mirrors them):
//!   offsets linear: column ((h*L + l)*K + k)*2 + d with d = 0 for x, 1 for y
//!   weights linear: column (h*L + l)*K + k, softmax taken over the L*K
//!   slots of each head.

use ndarray::{Array2, ArrayD, IxDyn};
use tapir_autograd::params::{Init, ParamStore, Session};
use tapir_autograd::Var;

/// Create the four projections of one deformable attention instance.
pub fn init_deform(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    heads: usize,
    levels: usize,
    points: usize,
) {
    let slots = heads * levels * points;
    store.ensure(&format!("{prefix}.off.w"), &[channels, slots * 2], Init::Zeros);
    // Spread initial offsets around each head's reference: head h points in
    // a distinct direction, ring k sits further out. The rotation and the
    // non-integer radius keep initial sampling points off the exact pixel
    // lattice, where bilinear interpolation has derivative kinks.
    let mut off_b = ArrayD::zeros(IxDyn(&[slots * 2]));
    for h in 0..heads {
        let angle = std::f64::consts::TAU * h as f64 / heads as f64 + 0.7;
        for l in 0..levels {
            for k in 0..points {
                let base = ((h * levels + l) * points + k) * 2;
                let radius = 0.8 * (k + 1) as f64;
                off_b[[base]] = angle.cos() * radius;
                off_b[[base + 1]] = angle.sin() * radius;
            }
        }
    }
    let off_b_name = format!("{prefix}.off.b");
    if !store.contains(&off_b_name) {
        store.insert(&off_b_name, off_b);
    }
    store.ensure(&format!("{prefix}.attw.w"), &[channels, slots], Init::Zeros);
    store.ensure(&format!("{prefix}.attw.b"), &[slots], Init::Zeros);
    store.ensure(
        &format!("{prefix}.val.w"),
        &[channels, channels],
        Init::XavierUniform { fan_in: channels, fan_out: channels },
    );
    store.ensure(&format!("{prefix}.val.b"), &[channels], Init::Zeros);
    store.ensure(
        &format!("{prefix}.out.w"),
        &[channels, channels],
        Init::XavierUniform { fan_in: channels, fan_out: channels },
    );
    store.ensure(&format!("{prefix}.out.b"), &[channels], Init::Zeros);
}

fn linear(sess: &mut Session, x: Var, w: &str, b: &str) -> Var {
    let wv = sess.param(w);
    let bv = sess.param(b);
    let y = sess.tape.matmul(x, wv);
    sess.tape.add(y, bv)
}

/// Apply deformable attention.
///
/// * `query`: (Nq, C)
/// * `ref_xy`: (Nq, 2) normalized centers in [0,1]; may carry gradient
/// * `value_maps`: per level, (H_l, W_l, C) — value projection applied here
///
/// Returns (Nq, C). Sampling location for level l is
/// `ref · (W_l, H_l) − 0.5 + offset` in pixel-center coordinates.
pub fn deform_attention(
    sess: &mut Session,
    prefix: &str,
    heads: usize,
    points: usize,
    query: Var,
    ref_xy: Var,
    value_maps: &[Var],
) -> Var {
    let nq = sess.tape.shape(query)[0];
    let c = sess.tape.shape(query)[1];
    let levels = value_maps.len();
    let k_pts = points;
    let dh = c / heads;
    assert!(dh * heads == c, "channels divisible by heads");

    let off = linear(sess, query, &format!("{prefix}.off.w"), &format!("{prefix}.off.b"));
    let attw = linear(sess, query, &format!("{prefix}.attw.w"), &format!("{prefix}.attw.b"));

    // Value-project each level once.
    let mut projected = Vec::with_capacity(levels);
    for &map in value_maps {
        let shape: Vec<usize> = sess.tape.shape(map).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let flat = sess.tape.reshape(map, &[h * w, c]);
        let v = linear(sess, flat, &format!("{prefix}.val.w"), &format!("{prefix}.val.b"));
        let v = sess.tape.reshape(v, &[h, w, c]);
        projected.push((v, h, w));
    }

    let ones_row = sess.constant(ArrayD::from_elem(IxDyn(&[1, dh]), 1.0));
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let w_cols = (h * levels * k_pts, (h + 1) * levels * k_pts);
        let w_slice = sess.tape.slice(attw, &[(0, nq), w_cols]);
        let w_soft = sess.tape.softmax_last(w_slice); // (Nq, L*K)

        let mut acc: Option<Var> = None;
        for (l, &(vmap, hl, wl)) in projected.iter().enumerate() {
            // ref scaled to this level's pixel grid, replicated K times.
            let scale_mat = sess.constant(
                ArrayD::from_shape_vec(
                    IxDyn(&[2, 2]),
                    vec![wl as f64, 0.0, 0.0, hl as f64],
                )
                .unwrap(),
            );
            let scaled = sess.tape.matmul(ref_xy, scale_mat);
            let scaled3 = sess.tape.reshape(scaled, &[nq, 1, 2]);
            let reps: Vec<Var> = vec![scaled3; k_pts];
            let tiled = sess.tape.concat(&reps, 1);
            let tiled = sess.tape.reshape(tiled, &[nq * k_pts, 2]);
            let base = sess.tape.add_scalar(tiled, -0.5);

            let oc0 = ((h * levels + l) * k_pts) * 2;
            let off_slice = sess.tape.slice(off, &[(0, nq), (oc0, oc0 + k_pts * 2)]);
            let off_rs = sess.tape.reshape(off_slice, &[nq * k_pts, 2]);
            let locs = sess.tape.add(base, off_rs);

            let map_h = {
                let shape: Vec<usize> = sess.tape.shape(vmap).to_vec();
                sess.tape
                    .slice(vmap, &[(0, shape[0]), (0, shape[1]), (h * dh, (h + 1) * dh)])
            };
            let sampled = sess.tape.bilinear_sample(map_h, locs); // (Nq*K, dh)
            let sampled3 = sess.tape.reshape(sampled, &[nq, k_pts, dh]);
            for k in 0..k_pts {
                let s_k = sess.tape.slice(sampled3, &[(0, nq), (k, k + 1), (0, dh)]);
                let s_k = sess.tape.reshape(s_k, &[nq, dh]);
                let col = l * k_pts + k;
                let w_k = sess.tape.slice(w_soft, &[(0, nq), (col, col + 1)]);
                let w_tiled = sess.tape.matmul(w_k, ones_row);
                let term = sess.tape.mul(w_tiled, s_k);
                acc = Some(match acc {
                    None => term,
                    Some(a) => sess.tape.add(a, term),
                });
            }
        }
        head_outs.push(acc.expect("at least one level"));
    }
    let cat = sess.tape.concat(&head_outs, 1);
    linear(sess, cat, &format!("{prefix}.out.w"), &format!("{prefix}.out.b"))
}

/// Reference oracle used by tests: the same computation with plain loops on
/// raw arrays. Kept here (not in the test module) so integration-level
/// checks can reuse it.
#[allow(clippy::too_many_arguments)]
pub fn deform_attention_oracle(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    points: usize,
    query: &Array2<f64>,
    ref_xy: &Array2<f64>,
    value_maps: &[ArrayD<f64>],
) -> Array2<f64> {
    let nq = query.nrows();
    let c = query.ncols();
    let levels = value_maps.len();
    let dh = c / heads;
    let g = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap();
    let mat = |x: &Array2<f64>, wname: &str, bname: &str| -> Array2<f64> {
        let w = g(wname);
        let b = g(bname);
        let cols = w.shape()[1];
        let mut out = Array2::zeros((x.nrows(), cols));
        for i in 0..x.nrows() {
            for j in 0..cols {
                let mut acc = b[[j]];
                for l in 0..x.ncols() {
                    acc += x[[i, l]] * w[[l, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };
    let off = mat(query, "off.w", "off.b");
    let attw = mat(query, "attw.w", "attw.b");
    // value projection per level
    let wv = g("val.w");
    let bv = g("val.b");
    let proj: Vec<ArrayD<f64>> = value_maps
        .iter()
        .map(|m| {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let mut out = ArrayD::zeros(IxDyn(&[h, w, c]));
            for y in 0..h {
                for x in 0..w {
                    for j in 0..c {
                        let mut acc = bv[[j]];
                        for l in 0..c {
                            acc += m[[y, x, l]] * wv[[l, j]];
                        }
                        out[[y, x, j]] = acc;
                    }
                }
            }
            out
        })
        .collect();

    let sample = |map: &ArrayD<f64>, x: f64, y: f64, c0: usize| -> Vec<f64> {
        let (h, w) = (map.shape()[0] as isize, map.shape()[1] as isize);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut out = vec![0.0; dh];
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let iy = y0 as isize + dy;
            if iy < 0 || iy >= h {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let ix = x0 as isize + dx;
                if ix < 0 || ix >= w {
                    continue;
                }
                for (o, item) in out.iter_mut().enumerate() {
                    *item += wx * wy * map[[iy as usize, ix as usize, c0 + o]];
                }
            }
        }
        out
    };

    let mut out = Array2::zeros((nq, c));
    for i in 0..nq {
        for h in 0..heads {
            // softmax over the head's L*K weight slots
            let s0 = h * levels * points;
            let logits: Vec<f64> = (0..levels * points).map(|j| attw[[i, s0 + j]]).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut head_acc = vec![0.0; dh];
            for l in 0..levels {
                let (hl, wl) = (proj[l].shape()[0], proj[l].shape()[1]);
                for k in 0..points {
                    let base = ((h * levels + l) * points + k) * 2;
                    let x = ref_xy[[i, 0]] * wl as f64 - 0.5 + off[[i, base]];
                    let y = ref_xy[[i, 1]] * hl as f64 - 0.5 + off[[i, base + 1]];
                    let v = sample(&proj[l], x, y, h * dh);
                    let weight = exps[l * points + k] / z;
                    for d in 0..dh {
                        head_acc[d] += weight * v[d];
                    }
                }
            }
            for d in 0..dh {
                out[[i, h * dh + d]] = head_acc[d];
            }
        }
    }
    mat(&out, "out.w", "out.b")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tapir_autograd::params::rng_for;

    fn randomize(store: &mut ParamStore, prefix: &str, seed: u64) {
        // Zero-init offsets/weights would make the oracle trivially easy;
        // give every projection real values.
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            if !name.starts_with(prefix) {
                continue;
            }
            let mut rng = rng_for(seed, &name);
            let arr = store.get(&name).unwrap().clone();
            let new = ArrayD::from_shape_fn(arr.raw_dim(), |_| rng.gen_range(-0.4..0.4));
            store.insert(&name, new);
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let (heads, points, c) = (2, 2, 8);
        let mut store = ParamStore::new(9);
        init_deform(&mut store, "d.attn", c, heads, 2, points);
        randomize(&mut store, "d.attn", 33);

        let mut rng = rng_for(5, "inputs");
        let nq = 5;
        let query = Array2::from_shape_fn((nq, c), |_| rng.gen_range(-1.0..1.0));
        let refs = Array2::from_shape_fn((nq, 2), |_| rng.gen_range(0.05..0.95));
        let maps = vec![
            ArrayD::from_shape_fn(IxDyn(&[4, 4, c]), |_| rng.gen_range(-1.0..1.0)),
            ArrayD::from_shape_fn(IxDyn(&[2, 2, c]), |_| rng.gen_range(-1.0..1.0)),
        ];

        let mut sess = Session::new(&store);
        let q = sess.constant(query.clone().into_dyn());
        let r = sess.constant(refs.clone().into_dyn());
        let mv: Vec<Var> = maps.iter().map(|m| sess.constant(m.clone())).collect();
        let out = deform_attention(&mut sess, "d.attn", heads, points, q, r, &mv);
        let got = sess.tape.value(out);

        let expect = deform_attention_oracle(&store, "d.attn", heads, points, &query, &refs, &maps);
        for i in 0..nq {
            for j in 0..c {
                assert!(
                    (got[[i, j]] - expect[[i, j]]).abs() < 1e-5,
                    "({i},{j}): {} vs {}",
                    got[[i, j]],
                    expect[[i, j]]
                );
            }
        }
    }

    #[test]
    fn uniform_weights_at_zero_init() {
        // Fresh init: attention weight logits are all zero, so each of the
        // L*K slots must get weight 1/(L*K); with equal constant maps the
        // output equals the (projected) constant.
        let (heads, points, c) = (2, 2, 4);
        let mut store = ParamStore::new(1);
        init_deform(&mut store, "u", c, heads, 1, points);
        let eye = ArrayD::from_shape_fn(IxDyn(&[c, c]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        store.insert("u.val.w", eye.clone());
        store.insert("u.out.w", eye);
        store.insert("u.off.b", ArrayD::zeros(IxDyn(&[heads * points * 2])));

        let mut sess = Session::new(&store);
        let q = sess.constant(ArrayD::zeros(IxDyn(&[3, c])));
        let refs = sess.constant(ArrayD::from_elem(IxDyn(&[3, 2]), 0.5));
        let map = sess.constant(ArrayD::from_elem(IxDyn(&[4, 4, c]), 2.5));
        let out = deform_attention(&mut sess, "u", heads, points, q, refs, &[map]);
        let v = sess.tape.value(out);
        for i in 0..3 {
            for j in 0..c {
                assert!((v[[i, j]] - 2.5).abs() < 1e-9, "{}", v[[i, j]]);
            }
        }
    }

    #[test]
    fn gradients_flow_to_all_projections() {
        let (heads, points, c) = (2, 2, 8);
        let mut store = ParamStore::new(77);
        init_deform(&mut store, "g", c, heads, 2, points);
        randomize(&mut store, "g", 78);
        let mut rng = rng_for(6, "in");
        let query = ArrayD::from_shape_fn(IxDyn(&[4, c]), |_| rng.gen_range(-1.0..1.0));
        let refs = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |_| rng.gen_range(0.2..0.8));
        let maps = [
            ArrayD::from_shape_fn(IxDyn(&[4, 4, c]), |_| rng.gen_range(-1.0..1.0)),
            ArrayD::from_shape_fn(IxDyn(&[2, 2, c]), |_| rng.gen_range(-1.0..1.0)),
        ];

        let loss_of = |store: &ParamStore| {
            let mut sess = Session::new(store);
            let q = sess.constant(query.clone());
            let r = sess.constant(refs.clone());
            let mv: Vec<Var> = maps.iter().map(|m| sess.constant(m.clone())).collect();
            let out = deform_attention(&mut sess, "g", heads, points, q, r, &mv);
            let sq = sess.tape.mul(out, out);
            let loss = sess.tape.sum_all(sq);
            sess.tape.value(loss)[[]]
        };
        let analytic = {
            let mut sess = Session::new(&store);
            let q = sess.constant(query.clone());
            let r = sess.constant(refs.clone());
            let mv: Vec<Var> = maps.iter().map(|m| sess.constant(m.clone())).collect();
            let out = deform_attention(&mut sess, "g", heads, points, q, r, &mv);
            let sq = sess.tape.mul(out, out);
            let loss = sess.tape.sum_all(sq);
            sess.grads(loss)
        };
        for (name, g) in &analytic {
            assert!(
                g.iter().any(|&x| x != 0.0),
                "{name} received no gradient at all"
            );
        }
        let checks =
            tapir_autograd::gradcheck::check_gradients(&mut store, &analytic, loss_of, 1e-5, 4);
        for check in checks {
            assert!(
                check.max_rel_err < 1e-4,
                "{}: {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
