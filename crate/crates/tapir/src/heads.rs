//! Classification heads.
//!
//! Frame-level tasks (phase, step) read the encoder's class embedding.
//! Box-level tasks (instrument, action) read a fusion of globally pooled
//! video features with the per-box feature from the detector; the ablation
//! head drops the box feature to quantify what localization contributes.

use crate::Result;
use tapir_autograd::params::{Init, ParamStore, Session};
use tapir_autograd::Var;

/// Create an affine head `head.<name>.{w,b}` mapping `in_dim -> classes`.
pub fn init_head(store: &mut ParamStore, name: &str, in_dim: usize, classes: usize) {
    store.ensure(
        &format!("head.{name}.w"),
        &[in_dim, classes],
        Init::XavierUniform { fan_in: in_dim, fan_out: classes },
    );
    store.ensure(&format!("head.{name}.b"), &[classes], Init::Zeros);
}

/// Apply head `name` to a (B, in_dim) feature matrix, returning (B, classes)
/// logits. Softmax/sigmoid is the caller's business (losses work on logits).
pub fn head_logits(sess: &mut Session, features: Var, name: &str) -> Var {
    let w = sess.param(&format!("head.{name}.w"));
    let b = sess.param(&format!("head.{name}.b"));
    let y = sess.tape.matmul(features, w);
    sess.tape.add(y, b)
}

/// Mean-pool a (T, H, W, C) feature grid to a (1, C) video descriptor.
pub fn pool_video_features(sess: &mut Session, grid: Var) -> Var {
    let shape: Vec<usize> = sess.tape.shape(grid).to_vec();
    let c = shape[3];
    let n = shape[0] * shape[1] * shape[2];
    let flat = sess.tape.reshape(grid, &[n, c]);
    let mean = sess.tape.mean_axis(flat, 0);
    sess.tape.reshape(mean, &[1, c])
}

/// Concatenate video descriptor (B, C) with box features (B, D) -> (B, C+D).
pub fn fuse_features(sess: &mut Session, video: Var, box_feat: Var) -> Var {
    sess.tape.concat(&[video, box_feat], 1)
}

/// Convenience: full fused box-task logits. `head_name` must have been
/// created with `in_dim = C + D`.
pub fn box_head_logits(
    sess: &mut Session,
    video: Var,
    box_feat: Var,
    head_name: &str,
) -> Result<Var> {
    let fused = fuse_features(sess, video, box_feat);
    Ok(head_logits(sess, fused, head_name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use tapir_autograd::params::rng_for;

    fn random_matrix(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rng_for(seed, "m");
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn head_logits_match_manual_affine() {
        let mut store = ParamStore::new(1);
        init_head(&mut store, "phase", 6, 11);
        let x = random_matrix(&[3, 6], 10);
        let mut sess = Session::new(&store);
        let xv = sess.constant(x.clone());
        let logits = head_logits(&mut sess, xv, "phase");
        let got = sess.tape.value(logits);
        let w = store.get("head.phase.w").unwrap();
        let b = store.get("head.phase.b").unwrap();
        for r in 0..3 {
            for k in 0..11 {
                let mut acc = b[[k]];
                for j in 0..6 {
                    acc += x[[r, j]] * w[[j, k]];
                }
                assert!((got[[r, k]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_features_are_grid_mean() {
        let grid = random_matrix(&[2, 3, 3, 4], 11);
        let store = ParamStore::new(0);
        let mut sess = Session::new(&store);
        let g = sess.constant(grid.clone());
        let pooled = pool_video_features(&mut sess, g);
        let got = sess.tape.value(pooled);
        assert_eq!(got.shape(), &[1, 4]);
        for c in 0..4 {
            let mut acc = 0.0;
            for t in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        acc += grid[[t, y, x, c]];
                    }
                }
            }
            assert!((got[[0, c]] - acc / 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_order_consistent() {
        // Swapping the two halves of the fused input and permuting the head
        // weight rows the same way must leave the logits unchanged.
        let c = 5;
        let d = 4;
        let mut store = ParamStore::new(2);
        init_head(&mut store, "action", c + d, 7);
        let video = random_matrix(&[1, c], 20);
        let boxf = random_matrix(&[1, d], 21);

        let run = |store: &ParamStore, first: &ArrayD<f64>, second: &ArrayD<f64>| {
            let mut sess = Session::new(store);
            let a = sess.constant(first.clone());
            let b = sess.constant(second.clone());
            let logits = box_head_logits(&mut sess, a, b, "action").unwrap();
            sess.tape.value(logits).clone()
        };

        let base = run(&store, &video, &boxf);

        // Build a store whose weight rows are permuted: box rows first.
        let w = store.get("head.action.w").unwrap().clone();
        let mut swapped = ArrayD::zeros(IxDyn(&[c + d, 7]));
        for k in 0..7 {
            for j in 0..d {
                swapped[[j, k]] = w[[c + j, k]];
            }
            for j in 0..c {
                swapped[[d + j, k]] = w[[j, k]];
            }
        }
        let mut store2 = ParamStore::new(2);
        init_head(&mut store2, "action", c + d, 7);
        store2.insert("head.action.w", swapped);
        store2.insert("head.action.b", store.get("head.action.b").unwrap().clone());
        let flipped = run(&store2, &boxf, &video);
        for k in 0..7 {
            assert!((base[[0, k]] - flipped[[0, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn action_columns_are_independent() {
        // Changing one output column of the weight matrix only moves that
        // class's logit — multi-label heads must not couple classes.
        let mut store = ParamStore::new(3);
        init_head(&mut store, "action", 6, 4);
        let x = random_matrix(&[1, 6], 30);
        let logits_of = |store: &ParamStore| {
            let mut sess = Session::new(store);
            let xv = sess.constant(x.clone());
            let l = head_logits(&mut sess, xv, "action");
            sess.tape.value(l).clone()
        };
        let before = logits_of(&store);
        let mut w = store.get("head.action.w").unwrap().clone();
        for j in 0..6 {
            w[[j, 2]] += 0.5;
        }
        store.insert("head.action.w", w);
        let after = logits_of(&store);
        for k in 0..4 {
            if k == 2 {
                assert!((after[[0, k]] - before[[0, k]]).abs() > 1e-6);
            } else {
                assert!((after[[0, k]] - before[[0, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut store = ParamStore::new(4);
        init_head(&mut store, "step", 5, 8);
        let x = random_matrix(&[2, 5], 40);
        let targets = vec![3usize, 6usize];
        let loss_of = |store: &ParamStore| {
            let mut sess = Session::new(store);
            let xv = sess.constant(x.clone());
            let logits = head_logits(&mut sess, xv, "step");
            let per_row = sess.tape.ce_with_logits(logits, &targets);
            let loss = sess.tape.mean_all(per_row);
            sess.tape.value(loss)[[]]
        };
        let analytic = {
            let mut sess = Session::new(&store);
            let xv = sess.constant(x.clone());
            let logits = head_logits(&mut sess, xv, "step");
            let per_row = sess.tape.ce_with_logits(logits, &targets);
            let loss = sess.tape.mean_all(per_row);
            sess.grads(loss)
        };
        let checks =
            tapir_autograd::gradcheck::check_gradients(&mut store, &analytic, loss_of, 1e-6, 10);
        for check in checks {
            assert!(check.max_rel_err < 1e-5, "{}: {}", check.name, check.max_rel_err);
        }
    }
}
