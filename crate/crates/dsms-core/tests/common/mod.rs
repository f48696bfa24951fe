//! Shared test oracles: central finite differences against tape gradients,
//! flat parameter-vector views of a store, and the end-to-end pipeline
//! fixture.

pub mod fixture;

use dsms_core::nn::ParameterStore;

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Assert elementwise closeness with a relative tolerance, falling back to
/// an absolute comparison when both sides are tiny.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, context: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{context}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs());
        let err = if denom < 1e-6 {
            (a - n).abs()
        } else {
            (a - n).abs() / denom
        };
        assert!(
            err <= tol,
            "{context}[{i}]: analytic {a} vs numeric {n} (err {err:.3e} > {tol:.0e})"
        );
    }
}

/// Concatenate every tensor of the store in its (sorted-name) order.
pub fn store_to_flat(store: &ParameterStore) -> Vec<f64> {
    let mut flat = Vec::with_capacity(store.value_count());
    for (_, tensor) in store.iter() {
        flat.extend_from_slice(&tensor.data);
    }
    flat
}

/// Inverse of [`store_to_flat`].
pub fn store_set_flat(store: &mut ParameterStore, flat: &[f64]) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut offset = 0;
    for name in names {
        let len = store.tensor(&name).len();
        store
            .set_data(&name, flat[offset..offset + len].to_vec())
            .expect("layout matches");
        offset += len;
    }
    assert_eq!(offset, flat.len(), "flat vector length mismatch");
}

/// Flatten a gradient map into the same layout as [`store_to_flat`],
/// filling zeros for parameters the loss never reached.
pub fn grads_to_flat(store: &ParameterStore, grads: &dsms_core::nn::Gradients) -> Vec<f64> {
    let mut flat = Vec::with_capacity(store.value_count());
    for (name, tensor) in store.iter() {
        match grads.get(name) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat_n(0.0, tensor.len())),
        }
    }
    flat
}
