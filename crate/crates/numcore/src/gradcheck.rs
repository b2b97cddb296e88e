//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Eval(format!(
            "objective must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::Eval(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Max over all coordinates of every parameter of `|g_ad − g_fd| / max(1, |g_fd|)`.
pub fn check_gradient<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check_gradient_for(store, &ids, h, f)
}

/// As [`check_gradient`], restricted to `ids`.
pub fn check_gradient_for<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::Eval(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::Eval("objective is not finite".into()));
    }
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.value(id).numel();
        let analytic: Vec<f64> = match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        for (i, &ad) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (up? - down?) / (2.0 * h);
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
