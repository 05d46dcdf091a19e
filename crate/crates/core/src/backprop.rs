//! Hand-derived gradients.
//!
//! The sweep runs from the top layer down. Alongside the usual gradient with
//! respect to each layer's input it carries one stream per linear position:
//! the gradient of `Y_l^P` receives `tau(beta_{l+1}^P)·dY_{l+1}^P` from the
//! layer above in addition to its local term. The scale parameter gets
//! `dbeta_l^P = <dY_l^P, Y_{l-1}^P>_F`.
//!
//! Softmax gradients use the exact row Jacobian-vector product.

use crate::error::{invalid, Result};
use crate::model::{
    forward, tau, ActivationCache, CacheMode, Layer, LayerState, ParamGroup, Params, PerPosition,
    Position, Tensors,
};
use crate::recompute::{backward_recompute, CheckpointPlan};
use crate::tensor::{silu_prime, softmax_rows_backward, Matrix};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Same layout as the parameters.
pub type Gradients = Tensors;

/// Mean next-token cross-entropy and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (s, v) = logits.shape();
    if targets.len() != s {
        return Err(invalid(format!(
            "{} targets for {s} logit rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(invalid(format!("target {t} >= vocab {v}")));
    }
    let mut d = Matrix::zeros(s, v);
    let mut loss = 0.0;
    let inv_s = 1.0 / s as f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        for (o, &z) in d.row_mut(i).iter_mut().zip(row) {
            *o = (z - lse).exp() * inv_s;
        }
        d.row_mut(i)[t] -= inv_s;
    }
    Ok((loss * inv_s, d))
}

/// Supplies each layer's forward intermediates to the sweep, which asks for
/// layers strictly in the order `L, L-1, ..., 1`.
pub trait StateSource {
    fn state(&mut self, l: usize) -> Result<LayerState>;
}

struct FullSource<'a> {
    params: &'a Params,
    cache: &'a ActivationCache,
}

impl StateSource for FullSource<'_> {
    fn state(&mut self, l: usize) -> Result<LayerState> {
        self.cache.full_state(&self.params.config, l)
    }
}

/// Test instrumentation for the sweep.
#[derive(Clone, Debug, Default)]
pub struct SweepHooks {
    /// Layers `l` whose `tau(beta_l^P)` is replaced by zero in the stream
    /// passed down to layer `l - 1`.
    pub cut_streams_at: Vec<usize>,
}

/// Per-layer gradient quantities recorded during the sweep; index `l - 1`.
#[derive(Clone, Debug, Default)]
pub struct SweepTrace {
    /// Gradient with respect to each layer's output `X_{l+1}`.
    pub d_out: Vec<Matrix>,
    /// Gradient streams `dY_l^P`.
    pub d_y: Vec<PerPosition<Matrix>>,
}

fn linear_backward(
    layer: &Layer,
    grads: &mut Layer,
    pos: Position,
    input: &Matrix,
    low_rank: Option<&PerPosition<Matrix>>,
    d_y: &Matrix,
) -> Result<Matrix> {
    let p = pos.index();
    match (layer, grads) {
        (Layer::Dense(w), Layer::Dense(g)) => {
            g.w[p].add_assign(&input.t_matmul(d_y)?)?;
            d_y.matmul_t(&w.w[p])
        }
        (Layer::Cross(c), Layer::Cross(g)) => {
            let t = &low_rank.ok_or_else(|| invalid("cross layer state lacks low-rank products"))?[p];
            g.b[p].add_assign(&t.t_matmul(d_y)?)?;
            let d_t = d_y.matmul_t(&c.b[p])?;
            g.a[p].add_assign(&input.t_matmul(&d_t)?)?;
            d_t.matmul_t(&c.a[p])
        }
        _ => Err(invalid("gradient layout does not match parameters")),
    }
}

fn add_opt(m: Matrix, carry: &Option<PerPosition<Matrix>>, pos: Position) -> Result<Matrix> {
    match carry {
        Some(c) => m.add(&c[pos.index()]),
        None => Ok(m),
    }
}

/// Backward through multi-head attention: given `dH` (gradient of the
/// concatenated heads) returns `(dY^Q, dY^K, dY^V)`.
fn attention_backward(
    st: &LayerState,
    d_heads: &Matrix,
    heads: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    let yq = &st.y[Position::Q.index()];
    let yk = &st.y[Position::K.index()];
    let yv = &st.y[Position::V.index()];
    let (s, h) = yq.shape();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(s, h);
    let mut dk = Matrix::zeros(s, h);
    let mut dv = Matrix::zeros(s, h);
    for hd in 0..heads {
        let off = hd * dh;
        let q = yq.column_block(off, dh)?;
        let k = yk.column_block(off, dh)?;
        let v = yv.column_block(off, dh)?;
        let p = &st.att_scores[hd];
        let g = d_heads.column_block(off, dh)?;
        let dp = g.matmul_t(&v)?;
        dv.set_column_block(off, &p.t_matmul(&g)?)?;
        let ds = softmax_rows_backward(p, &dp)?;
        dq.set_column_block(off, &ds.matmul(&k)?.scale(scale))?;
        dk.set_column_block(off, &ds.t_matmul(&q)?.scale(scale))?;
    }
    Ok((dq, dk, dv))
}

/// The descending sweep shared by the full-cache and recompute paths.
pub fn sweep(
    params: &Params,
    src: &mut dyn StateSource,
    tokens: &[usize],
    d_logits: &Matrix,
    hooks: &SweepHooks,
) -> Result<(Gradients, SweepTrace)> {
    let cfg = &params.config;
    let num_layers = cfg.layers;
    if d_logits.shape() != (tokens.len(), cfg.vocab) {
        return Err(invalid(format!(
            "d_logits shape {:?} does not match ({}, {})",
            d_logits.shape(),
            tokens.len(),
            cfg.vocab
        )));
    }
    let mut grads = params.tensors.zeros_like();
    let mut trace = SweepTrace {
        d_out: vec![Matrix::zeros(0, 0); num_layers],
        d_y: Vec::with_capacity(num_layers),
    };

    let mut d_x = d_logits.matmul_t(&params.tensors.lm_head)?;
    // tau(beta_{l+1})·dY_{l+1}, absent above the top layer.
    let mut carry: Option<PerPosition<Matrix>> = None;
    // dY_{l+1}, waiting for Y_l to form dbeta_{l+1}.
    let mut pending_dy: Option<PerPosition<Matrix>> = None;

    for l in (1..=num_layers).rev() {
        let st = src.state(l)?;
        if l == num_layers {
            let x_final = st.output()?;
            grads.lm_head = x_final.t_matmul(d_logits)?;
        }
        if let Some(dy_next) = pending_dy.take() {
            if let Layer::Cross(g) = &mut grads.layers[l] {
                for p in 0..7 {
                    g.beta[p] = dy_next[p].frob_inner(&st.y[p])?;
                }
            }
        }
        trace.d_out[l - 1] = d_x.clone();

        let layer = params.layer(l);
        let glayer = &mut grads.layers[l - 1];
        let low = st.low_rank.as_ref();
        let mut dy: Vec<Matrix> = vec![Matrix::zeros(0, 0); 7];

        let dy_down = add_opt(d_x.clone(), &carry, Position::Down)?;
        let d_xdown = linear_backward(layer, glayer, Position::Down, &st.x_down, low, &dy_down)?;
        dy[Position::Down.index()] = dy_down;

        let y_gate = &st.y[Position::Gate.index()];
        let y_up = &st.y[Position::Up.index()];
        let dy_up = add_opt(d_xdown.hadamard(&st.gate_silu)?, &carry, Position::Up)?;
        let dy_gate = add_opt(
            d_xdown.hadamard(y_up)?.hadamard(&silu_prime(y_gate))?,
            &carry,
            Position::Gate,
        )?;
        let mut d_att = d_x;
        d_att.add_assign(&linear_backward(layer, glayer, Position::Gate, &st.att, low, &dy_gate)?)?;
        d_att.add_assign(&linear_backward(layer, glayer, Position::Up, &st.att, low, &dy_up)?)?;
        dy[Position::Gate.index()] = dy_gate;
        dy[Position::Up.index()] = dy_up;

        let dy_o = add_opt(d_att.clone(), &carry, Position::O)?;
        let d_heads = linear_backward(layer, glayer, Position::O, &st.att_heads, low, &dy_o)?;
        dy[Position::O.index()] = dy_o;

        let (dq, dk, dv) = attention_backward(&st, &d_heads, cfg.heads)?;
        let mut d_in = d_att;
        for (pos, local) in [(Position::Q, dq), (Position::K, dk), (Position::V, dv)] {
            let dyp = add_opt(local, &carry, pos)?;
            d_in.add_assign(&linear_backward(layer, glayer, pos, &st.x, low, &dyp)?)?;
            dy[pos.index()] = dyp;
        }
        let dy: PerPosition<Matrix> = dy.try_into().expect("seven streams");

        carry = match layer {
            Layer::Cross(c) => {
                let cut = hooks.cut_streams_at.contains(&l);
                let mut next = Vec::with_capacity(7);
                for p in 0..7 {
                    let t = if cut { 0.0 } else { tau(c.beta[p], cfg.epsilon) };
                    next.push(dy[p].scale(t));
                }
                pending_dy = Some(dy.clone());
                Some(next.try_into().expect("seven streams"))
            }
            Layer::Dense(_) => None,
        };
        trace.d_y.push(dy);
        d_x = d_in;
    }
    trace.d_y.reverse();

    for (i, &t) in tokens.iter().enumerate() {
        let row = grads.embed.row_mut(t);
        for (g, v) in row.iter_mut().zip(d_x.row(i)) {
            *g += v;
        }
    }
    Ok((grads, trace))
}

/// Backward pass over a full cache.
pub fn backward(params: &Params, cache: &ActivationCache, d_logits: &Matrix) -> Result<Gradients> {
    Ok(backward_with_hooks(params, cache, d_logits, &SweepHooks::default())?.0)
}

pub fn backward_with_hooks(
    params: &Params,
    cache: &ActivationCache,
    d_logits: &Matrix,
    hooks: &SweepHooks,
) -> Result<(Gradients, SweepTrace)> {
    if cache.mode != CacheMode::Full {
        return Err(invalid("backward needs a full cache; use backward_recompute"));
    }
    if cache.layers.len() != params.config.layers {
        return Err(invalid(format!(
            "cache has {} layers, model has {}",
            cache.layers.len(),
            params.config.layers
        )));
    }
    params.check_tokens(&cache.tokens)?;
    let mut src = FullSource { params, cache };
    sweep(params, &mut src, &cache.tokens, d_logits, hooks)
}

/// Loss and gradients of one sequence. With a plan, runs the selective
/// cache and the recompute sweep.
pub fn sequence_loss_and_grad(
    params: &Params,
    inputs: &[usize],
    targets: &[usize],
    plan: Option<&CheckpointPlan>,
) -> Result<(f64, Gradients)> {
    let mode = plan.map_or(CacheMode::Full, |p| CacheMode::Selective(p.clone()));
    let (logits, cache) = forward(params, inputs, mode)?;
    let (loss, d) = loss_and_grad(&logits, targets)?;
    let grads = match plan {
        Some(_) => backward_recompute(params, &cache, &d)?,
        None => backward(params, &cache, &d)?,
    };
    Ok((loss, grads))
}

pub fn sequence_loss(params: &Params, inputs: &[usize], targets: &[usize]) -> Result<f64> {
    let logits = crate::model::logits(params, inputs)?;
    Ok(loss_and_grad(&logits, targets)?.0)
}

/// `max(|a|, |b|, 1e-8)`-normalised difference.
pub fn relative_difference(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub max_rel_err: f64,
    pub coords_tested: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub fd_step: f64,
    pub groups: BTreeMap<String, GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.len() == ParamGroup::ALL.len()
            && self.groups.values().all(|g| g.max_rel_err <= tol)
    }
}

/// Groups with more coordinates than this are subsampled.
const FULL_CHECK_LIMIT: usize = 2_000;
const SUBSAMPLE: usize = 256;

/// Initial state for gradient checks: every low-rank path active, every
/// `|beta|` in `[0.5, 1.5]`, embeddings ~ N(0, 0.5) and lm_head
/// ~ N(0, 0.3/sqrt(h)). At the training init scale attention logits are near
/// zero and the query/key gradients fall below what central differences can
/// resolve; much larger scales saturate the output softmax instead.
pub fn grad_check_params(cfg: &crate::model::ModelConfig, seed: u64) -> Result<Params> {
    let mut params = Params::init(cfg, seed)?;
    params.randomize_low_rank(seed ^ 0x5eed, 0.5, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4be);
    params.tensors.embed = Matrix::randn(cfg.vocab, cfg.hidden, 0.5, &mut rng);
    params.tensors.lm_head =
        Matrix::randn(cfg.hidden, cfg.vocab, 0.3 / (cfg.hidden as f64).sqrt(), &mut rng);
    Ok(params)
}

/// Deterministic sequence of `seq_len + 1` tokens for gradient checks.
pub fn grad_check_tokens(vocab: usize, seq_len: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70c5);
    (0..=seq_len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Compares analytic gradients with central differences for the given
/// parameters and sequence.
pub fn grad_check_at(
    params: &Params,
    tokens: &[usize],
    seed: u64,
    fd_step: f64,
) -> Result<GradCheckReport> {
    if tokens.len() < 2 {
        return Err(invalid("gradient check needs at least two tokens"));
    }
    if !(fd_step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let (inputs, targets) = (&tokens[..tokens.len() - 1], &tokens[1..]);
    let (_, grads) = sequence_loss_and_grad(params, inputs, targets, None)?;
    let analytic: Vec<(ParamGroup, Vec<f64>)> = grads
        .slices()
        .into_iter()
        .map(|(g, s)| (g, s.to_vec()))
        .collect();

    // Flat coordinates per group: (slice index, element index).
    let mut coords: BTreeMap<ParamGroup, Vec<(usize, usize)>> = BTreeMap::new();
    for (si, (g, s)) in analytic.iter().enumerate() {
        let entry = coords.entry(*g).or_default();
        entry.extend((0..s.len()).map(|e| (si, e)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let mut probe = params.clone();
    let mut groups = BTreeMap::new();
    for group in ParamGroup::ALL {
        let all = coords.remove(&group).unwrap_or_default();
        let chosen: Vec<(usize, usize)> = if all.len() > FULL_CHECK_LIMIT {
            let mut idx = sample(&mut rng, all.len(), SUBSAMPLE).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        } else {
            all
        };
        let mut worst = 0.0f64;
        for &(si, e) in &chosen {
            let orig = params.tensors.slices()[si].1[e];
            let mut eval = |v: f64| -> Result<f64> {
                probe.tensors.slices_mut()[si].1[e] = v;
                sequence_loss(&probe, inputs, targets)
            };
            let plus = eval(orig + fd_step)?;
            let minus = eval(orig - fd_step)?;
            eval(orig)?;
            let numeric = (plus - minus) / (2.0 * fd_step);
            worst = worst.max(relative_difference(analytic[si].1[e], numeric));
        }
        groups.insert(
            group.name().to_string(),
            GroupReport {
                max_rel_err: worst,
                coords_tested: chosen.len(),
            },
        );
    }
    Ok(GradCheckReport { fd_step, groups })
}

/// Gradient check on a freshly initialised model with randomised low-rank
/// factors and scales.
pub fn grad_check(cfg: &crate::model::ModelConfig, seed: u64, fd_step: f64) -> Result<GradCheckReport> {
    let params = grad_check_params(cfg, seed)?;
    let tokens = grad_check_tokens(cfg.vocab, cfg.seq_len, seed);
    grad_check_at(&params, &tokens, seed, fd_step)
}
