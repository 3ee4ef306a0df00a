//! Finite-difference gradient verification. This is the independent oracle
//! for the autodiff engine: it only ever evaluates forward losses on
//! perturbed parameters and never touches the tape's backward pass.

use crate::error::Result;
use crate::numerics::params::ParamStore;

/// Central-difference gradient of `loss_fn` with respect to every parameter
/// value, at step size `h`. Returns per-parameter gradient buffers in store
/// order.
pub fn central_difference_grads<F>(
    store: &mut ParamStore,
    h: f64,
    loss_fn: F,
) -> Result<Vec<(String, Vec<f64>)>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let len = store.get(&name)?.numel();
        let mut grads = vec![0.0; len];
        for (i, g) in grads.iter_mut().enumerate() {
            let original = store.get(&name)?.values()[i];
            store.get_mut(&name)?.values_mut()[i] = original + h;
            let plus = loss_fn(store)?;
            store.get_mut(&name)?.values_mut()[i] = original - h;
            let minus = loss_fn(store)?;
            store.get_mut(&name)?.values_mut()[i] = original;
            *g = (plus - minus) / (2.0 * h);
        }
        out.push((name, grads));
    }
    Ok(out)
}

/// Largest relative error between autodiff gradients (already accumulated in
/// the store) and the finite-difference reference, with a unit floor on the
/// denominator so near-zero gradients compare absolutely.
pub fn max_relative_error(store: &ParamStore, reference: &[(String, Vec<f64>)]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (name, fd) in reference {
        let t = store.get(name)?;
        let ad = t.grad().unwrap_or(&[]);
        assert_eq!(ad.len(), fd.len(), "gradient length mismatch for {name}");
        for (a, f) in ad.iter().zip(fd) {
            let denom = a.abs().max(f.abs()).max(1.0);
            worst = worst.max((a - f).abs() / denom);
        }
    }
    Ok(worst)
}
