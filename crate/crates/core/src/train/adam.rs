//! Bias-corrected Adam with a separate learning-rate scale for the low-rank
//! group (A, B and beta).

use crate::error::{invalid, Error, Result};
use crate::model::Tensors;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensors,
    pub v: Tensors,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &Tensors) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One update. Low-rank parameters use `lr * lowrank_scale`. A non-finite
/// gradient rejects the step and leaves parameters and state untouched.
pub fn adam_step(
    params: &mut Tensors,
    grads: &Tensors,
    state: &mut AdamState,
    lr: f64,
    lowrank_scale: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            state.t + 1
        )));
    }
    let g = grads.slices();
    let mut p = params.slices_mut();
    let mut m = state.m.slices_mut();
    let mut v = state.v.slices_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(invalid("optimizer state does not match parameter layout"));
    }
    let t = state.t + 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (((pi, gi), mi), vi) in p.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let (group, pd) = pi;
        if pd.len() != gi.1.len() || mi.1.len() != pd.len() || vi.1.len() != pd.len() {
            return Err(invalid("optimizer state does not match parameter shapes"));
        }
        let rate = if group.is_low_rank() { lr * lowrank_scale } else { lr };
        for k in 0..pd.len() {
            let gk = gi.1[k];
            let mk = b1 * mi.1[k] + (1.0 - b1) * gk;
            let vk = b2 * vi.1[k] + (1.0 - b2) * gk * gk;
            mi.1[k] = mk;
            vi.1[k] = vk;
            pd[k] -= rate * (mk / c1) / ((vk / c2).sqrt() + eps);
        }
    }
    state.t = t;
    Ok(())
}
