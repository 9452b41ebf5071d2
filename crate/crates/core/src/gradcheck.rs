//! Central finite-difference gradients for verifying the backward pass.

use crate::params::{Gradients, ParamStore};

/// Central-difference gradient of `f` with respect to every store
/// parameter. `f` must be a pure function of the store contents.
pub fn fd_grad<F>(store: &mut ParamStore, mut f: F, h: f64) -> Gradients
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = store.zero_grads();
    for p in 0..store.len() {
        for j in 0..store.value(p).len() {
            let orig = store.value(p).data()[j];
            store.value_mut(p).data_mut()[j] = orig + h;
            let fp = f(store);
            store.value_mut(p).data_mut()[j] = orig - h;
            let fm = f(store);
            store.value_mut(p).data_mut()[j] = orig;
            out.tensor_mut(p).data_mut()[j] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

/// Largest relative disagreement between two gradient sets. The denominator
/// is floored so that near-zero pairs compare absolutely.
pub fn max_rel_err(a: &Gradients, b: &Gradients) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        for (x, y) in a.tensor(i).iter().zip(b.tensor(i).iter()) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
