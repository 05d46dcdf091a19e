//! Activation-efficient backward pass.
//!
//! The selective cache keeps every layer input, every low-rank product
//! `X_l^P·A_l^P`, and the linear outputs of the checkpointed layers only. The
//! backward sweep rebuilds the missing outputs downward from the nearest
//! checkpoint by inverting the cross-layer residual,
//!
//! ```text
//! Y_l^P = (Y_{l+1}^P − (X_{l+1}^P A_{l+1}^P)·B_{l+1}^P) / tau(beta_{l+1}^P)
//! ```
//!
//! and recomputes the first layer's outputs from its input and full weights.
//! Attention probabilities are always rebuilt.

use crate::backprop::{sweep, Gradients, StateSource, SweepHooks};
use crate::error::{invalid, Error, Result};
use crate::model::{
    forward, rebuild_layer_state, tau, ActivationCache, CacheMode, Layer, LayerState, Params,
    PerPosition, POSITIONS,
};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;

/// Layers whose linear outputs are stored in the selective cache.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    layers: BTreeSet<usize>,
}

impl CheckpointPlan {
    /// A plan over a model with `num_layers` layers. The set must contain
    /// `num_layers` and lie within `[2, num_layers]`.
    pub fn new(layers: impl IntoIterator<Item = usize>, num_layers: usize) -> Result<Self> {
        let plan = Self {
            layers: layers.into_iter().collect(),
        };
        plan.validate(num_layers)?;
        Ok(plan)
    }

    /// Every layer from 2 to `num_layers`.
    pub fn store_all(num_layers: usize) -> Result<Self> {
        Self::new(2..=num_layers, num_layers)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if num_layers < 2 {
            return Err(invalid("checkpoint plans need at least two layers"));
        }
        if !self.layers.contains(&num_layers) {
            return Err(invalid(format!(
                "checkpoint set {:?} must contain the last layer {num_layers}",
                self.layers
            )));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l < 2 || l > num_layers) {
            return Err(invalid(format!(
                "checkpoint layer {bad} outside [2, {num_layers}]"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, l: usize) -> bool {
        self.layers.contains(&l)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers.iter().copied().collect()
    }
}

/// `k` checkpoints spaced evenly over `[2, L]`, always including `L`.
///
/// Layer `j` (counting down from 0) sits at `L − j·(L−1)/k`, rounded half to
/// even in exact integer arithmetic.
pub fn select_checkpoints(num_layers: usize, k: usize) -> Result<CheckpointPlan> {
    if num_layers < 2 || k == 0 || k > num_layers - 1 {
        return Err(invalid(format!(
            "checkpoint count {k} must lie in [1, {}]",
            num_layers.saturating_sub(1)
        )));
    }
    let (l, k) = (num_layers as u64, k as u64);
    let layers = (0..k).map(|j| {
        let num = l * k - j * (l - 1);
        let (q, rem) = (num / k, num % k);
        let up = match (2 * rem).cmp(&k) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => q % 2 == 1,
        };
        (q + u64::from(up)) as usize
    });
    CheckpointPlan::new(layers, num_layers)
}

/// Inverse of the cross-layer residual: recovers `Y_l` from layer `l+1`.
pub fn reconstruct_prev(
    y_next: &Matrix,
    low_rank_next: &Matrix,
    b_next: &Matrix,
    beta_next: f64,
    epsilon: f64,
) -> Result<Matrix> {
    let delta = low_rank_next.matmul(b_next)?;
    let mut out = y_next.sub(&delta)?;
    out.scale_assign(1.0 / tau(beta_next, epsilon));
    Ok(out)
}

/// Recovers every linear output of layer `l` from the outputs of `l + 1`.
fn reconstruct_layer(
    params: &Params,
    cache: &ActivationCache,
    l: usize,
    y_next: &PerPosition<Matrix>,
) -> Result<PerPosition<Matrix>> {
    let Layer::Cross(next) = params.layer(l + 1) else {
        return Err(invalid(format!("layer {} has no cross-layer residual", l + 1)));
    };
    let lows = cache.layers[l].low_rank_out.as_ref().ok_or(Error::MissingActivation {
        layer: l + 1,
        position: "*",
        what: "low-rank product",
    })?;
    let mut out = Vec::with_capacity(7);
    for p in 0..7 {
        out.push(reconstruct_prev(
            &y_next[p],
            &lows[p],
            &next.b[p],
            next.beta[p],
            params.config.epsilon,
        )?);
    }
    Ok(out.try_into().expect("seven positions"))
}

/// Recomputes the dense first layer's outputs from its stored input.
fn recompute_first_layer(params: &Params, x: &Matrix) -> Result<PerPosition<Matrix>> {
    let layer = params.layer(1);
    if !matches!(layer, Layer::Dense(_)) {
        return Err(invalid("first layer must be dense"));
    }
    Ok(crate::model::layer_forward(&params.config, layer, x.clone(), None)?.y)
}

/// Serves layer states for the descending sweep from a selective cache.
struct SelectiveSource<'a> {
    params: &'a Params,
    cache: &'a ActivationCache,
    plan: &'a CheckpointPlan,
    /// Linear outputs of the layer served last, the starting point for
    /// reconstructing the one below.
    above: Option<(usize, PerPosition<Matrix>)>,
}

impl SelectiveSource<'_> {
    fn outputs(&mut self, l: usize) -> Result<PerPosition<Matrix>> {
        let rec = &self.cache.layers[l - 1];
        if l == 1 {
            let x = rec.x.as_ref().ok_or(Error::MissingActivation {
                layer: 1,
                position: "*",
                what: "layer input",
            })?;
            return recompute_first_layer(self.params, x);
        }
        if self.plan.contains(l) {
            return rec.y.clone().ok_or(Error::MissingActivation {
                layer: l,
                position: "*",
                what: "checkpointed linear outputs",
            });
        }
        match &self.above {
            Some((m, y_next)) if *m == l + 1 => reconstruct_layer(self.params, self.cache, l, y_next),
            _ => Err(Error::MissingActivation {
                layer: l,
                position: "*",
                what: "linear outputs of the layer above",
            }),
        }
    }
}

impl StateSource for SelectiveSource<'_> {
    fn state(&mut self, l: usize) -> Result<LayerState> {
        let y = self.outputs(l)?;
        let rec = &self.cache.layers[l - 1];
        let x = rec.x.clone().ok_or(Error::MissingActivation {
            layer: l,
            position: "*",
            what: "layer input",
        })?;
        if l >= 2 && rec.low_rank_out.is_none() {
            return Err(Error::MissingActivation {
                layer: l,
                position: "*",
                what: "low-rank product",
            });
        }
        self.above = Some((l, y.clone()));
        rebuild_layer_state(&self.params.config, x, y, rec.low_rank_out.clone())
    }
}

/// Backward pass over a selective cache.
pub fn backward_recompute(
    params: &Params,
    cache: &ActivationCache,
    d_logits: &Matrix,
) -> Result<Gradients> {
    Ok(backward_recompute_with_hooks(params, cache, d_logits, &SweepHooks::default())?.0)
}

pub fn backward_recompute_with_hooks(
    params: &Params,
    cache: &ActivationCache,
    d_logits: &Matrix,
    hooks: &SweepHooks,
) -> Result<(Gradients, crate::backprop::SweepTrace)> {
    let CacheMode::Selective(plan) = &cache.mode else {
        return Err(invalid("backward_recompute needs a selective cache"));
    };
    plan.validate(params.config.layers)?;
    if cache.layers.len() != params.config.layers {
        return Err(invalid(format!(
            "cache has {} layers, model has {}",
            cache.layers.len(),
            params.config.layers
        )));
    }
    let mut src = SelectiveSource {
        params,
        cache,
        plan,
        above: None,
    };
    sweep(params, &mut src, &cache.tokens, d_logits, hooks)
}

/// Relative reconstruction error of one linear output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionError {
    pub layer: usize,
    pub position: &'static str,
    pub rel_error: f64,
}

/// Compares every linear output the recompute sweep sees against the
/// full-cache forward, for layers `1..=L`.
pub fn reconstruction_error_profile(
    params: &Params,
    tokens: &[usize],
    plan: &CheckpointPlan,
) -> Result<Vec<ReconstructionError>> {
    let (_, full) = forward(params, tokens, CacheMode::Full)?;
    let (_, sel) = forward(params, tokens, CacheMode::Selective(plan.clone()))?;
    let mut src = SelectiveSource {
        params,
        cache: &sel,
        plan,
        above: None,
    };
    let mut out = Vec::new();
    for l in (1..=params.config.layers).rev() {
        let got = src.state(l)?.y;
        let truth = full.layers[l - 1].y.as_ref().expect("full cache stores outputs");
        for (p, pos) in POSITIONS.iter().enumerate() {
            let norm = truth[p].frob_norm();
            let diff = got[p].sub(&truth[p])?.frob_norm();
            let rel_error = if norm == 0.0 { diff } else { diff / norm };
            out.push(ReconstructionError {
                layer: l,
                position: pos.name(),
                rel_error,
            });
        }
    }
    out.sort_by_key(|e| (e.layer, POSITIONS.iter().position(|p| p.name() == e.position)));
    Ok(out)
}

pub fn write_profile_csv<W: Write>(w: &mut W, rows: &[ReconstructionError]) -> Result<()> {
    writeln!(w, "layer,position,rel_error")?;
    for r in rows {
        writeln!(w, "{},{},{:e}", r.layer, r.position, r.rel_error)?;
    }
    Ok(())
}
