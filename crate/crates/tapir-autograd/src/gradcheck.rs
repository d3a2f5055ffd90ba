//! Finite-difference validation of analytic gradients.
//!
//! We compare analytic parameter-group gradients against central differences
//! of the scalar loss. Checking every element of large tensors is too slow,
//! so the checker perturbs a deterministic sample of elements per group and
//! reports the worst relative error seen.

use crate::params::{rng_for, ParamStore};
use ndarray::ArrayD;
use rand::Rng;
use std::collections::BTreeMap;

/// Result of checking one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elems: usize,
}

/// Relative error as `|a - n| / max(|a|, |n|, floor)`.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central-difference check over every parameter in `store`.
///
/// `loss_fn` must be a pure function of the store contents. `eps` is the
/// perturbation step, `max_elems_per_group` caps how many coordinates are
/// probed in each tensor (sampled deterministically from the group name).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    mut loss_fn: F,
    eps: f64,
    max_elems_per_group: usize,
) -> Vec<GroupCheck>
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = store.names().cloned().collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let grad = match analytic.get(&name) {
            Some(g) => g.clone(),
            None => continue,
        };
        let n_elems = store.get(&name).unwrap().len();
        let mut idxs: Vec<usize> = (0..n_elems).collect();
        if n_elems > max_elems_per_group {
            // Deterministic subsample: shuffle by keyed RNG, take prefix.
            let mut rng = rng_for(0xC0FFEE, &name);
            for i in (1..idxs.len()).rev() {
                let j = rng.gen_range(0..=i);
                idxs.swap(i, j);
            }
            idxs.truncate(max_elems_per_group);
            idxs.sort_unstable();
        }
        let mut max_rel = 0.0f64;
        for &flat in &idxs {
            let original = {
                let t = store.get(&name).unwrap();
                t.as_slice().unwrap()[flat]
            };
            set_flat(store, &name, flat, original + eps);
            let up = loss_fn(store);
            set_flat(store, &name, flat, original - eps);
            let down = loss_fn(store);
            set_flat(store, &name, flat, original);
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_slice().unwrap()[flat];
            max_rel = max_rel.max(rel_err(a, numeric, 1e-4));
        }
        out.push(GroupCheck {
            name,
            max_rel_err: max_rel,
            checked_elems: idxs.len(),
        });
    }
    out
}

fn set_flat(store: &mut ParamStore, name: &str, flat: usize, value: f64) {
    let t = store.get_mut(name).unwrap();
    t.as_slice_mut().unwrap()[flat] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Session};

    #[test]
    fn quadratic_loss_gradient_matches() {
        // loss = sum((W x - y)^2) over a fixed batch, a case with a clean
        // closed form so the checker itself is being exercised, not the model.
        let mut store = ParamStore::new(3);
        store.ensure("w", &[4, 3], Init::Normal { std: 0.5 });
        let x = ndarray::Array2::from_shape_fn((4, 1), |(i, _)| 0.3 * i as f64 + 0.1);
        let y = ndarray::Array2::from_shape_fn((3, 1), |(i, _)| 1.0 - 0.2 * i as f64);

        let loss_of = |s: &ParamStore| -> f64 {
            let w = s.get("w").unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            let r = w.t().dot(&x) - &y;
            r.iter().map(|v| v * v).sum()
        };

        let analytic = {
            let mut sess = Session::new(&store);
            let w = sess.param("w");
            let xc = sess.constant(x.clone().into_dyn());
            let yc = sess.constant(y.clone().into_dyn());
            let wt = sess.tape.transpose2(w);
            let pred = sess.tape.matmul(wt, xc);
            let resid = sess.tape.sub(pred, yc);
            let sq = sess.tape.mul(resid, resid);
            let loss = sess.tape.sum_all(sq);
            sess.grads(loss)
        };

        let checks = check_gradients(&mut store, &analytic, loss_of, 1e-3, 64);
        assert_eq!(checks.len(), 1);
        assert!(
            checks[0].max_rel_err < 1e-2,
            "rel err {}",
            checks[0].max_rel_err
        );
    }
}
