//! The cross-layer low-rank residual transformer.
//!
//! Layer 1 holds full weight matrices. Every later layer computes each of its
//! seven linear outputs as
//!
//! ```text
//! Y_l^P = tau(beta_l^P) · Y_{l-1}^P + (X_l^P · A_l^P) · B_l^P
//! ```
//!
//! where `tau(beta) = sign(beta)(|beta| + eps)`. Attention and the SwiGLU FFN
//! use in-layer residuals; normalisation and rotary embeddings are omitted.
//! A full-rank baseline (`Arch::FullRank`) uses dense weights everywhere.

use crate::error::{invalid, Error, Result};
use crate::recompute::CheckpointPlan;
use crate::tensor::{silu, softmax_rows, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Linear-layer slot inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

pub const POSITIONS: [Position; 7] = [
    Position::Q,
    Position::K,
    Position::V,
    Position::O,
    Position::Gate,
    Position::Up,
    Position::Down,
];

impl Position {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Position::Q => "Q",
            Position::K => "K",
            Position::V => "V",
            Position::O => "O",
            Position::Gate => "gate",
            Position::Up => "up",
            Position::Down => "down",
        }
    }

    pub fn in_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Position::Down => cfg.ffn_hidden,
            _ => cfg.hidden,
        }
    }

    pub fn out_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Position::Gate | Position::Up => cfg.ffn_hidden,
            _ => cfg.hidden,
        }
    }
}

/// One value per linear position, indexed by `Position::index`.
pub type PerPosition<T> = [T; 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "crnet")]
    CrNet,
    #[serde(rename = "full_rank")]
    FullRank,
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_causal() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    /// Ranks of layers `2..=layers`, so `layers - 1` entries.
    pub ranks: Vec<usize>,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub arch: Arch,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Config with the same rank for every low-rank layer.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        layers: usize,
        hidden: usize,
        ffn_hidden: usize,
        heads: usize,
        rank: usize,
        vocab: usize,
        seq_len: usize,
        arch: Arch,
    ) -> Self {
        Self {
            layers,
            hidden,
            ffn_hidden,
            heads,
            ranks: vec![rank; layers.saturating_sub(1)],
            vocab,
            seq_len,
            epsilon: default_epsilon(),
            arch,
            causal: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn_hidden == 0 {
            return Err(invalid("layers, hidden and ffn_hidden must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(invalid("vocab and seq_len must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if self.arch == Arch::CrNet {
            if self.ranks.len() != self.layers - 1 {
                return Err(invalid(format!(
                    "rank schedule has {} entries, expected {}",
                    self.ranks.len(),
                    self.layers - 1
                )));
            }
            let cap = self.hidden.min(self.ffn_hidden);
            if let Some((i, r)) = self
                .ranks
                .iter()
                .enumerate()
                .find(|(_, &r)| r == 0 || r >= cap)
            {
                return Err(invalid(format!(
                    "rank {r} of layer {} must satisfy 1 <= r < {cap}",
                    i + 2
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Rank of 1-based layer `l >= 2`.
    pub fn rank(&self, l: usize) -> usize {
        self.ranks[l - 2]
    }
}

/// `sign(beta)·(|beta| + epsilon)` with `sign(0) = +1`.
pub fn tau(beta: f64, epsilon: f64) -> f64 {
    if beta >= 0.0 {
        beta + epsilon
    } else {
        beta - epsilon
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: PerPosition<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossLayer {
    pub a: PerPosition<Matrix>,
    pub b: PerPosition<Matrix>,
    pub beta: PerPosition<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Cross(CrossLayer),
}

/// Parameter groups, used for optimizer scaling and gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "embed")]
    Embed,
    #[serde(rename = "W")]
    W,
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "lm_head")]
    LmHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::W,
        ParamGroup::A,
        ParamGroup::B,
        ParamGroup::Beta,
        ParamGroup::Embed,
        ParamGroup::LmHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embed => "embed",
            ParamGroup::W => "W",
            ParamGroup::A => "A",
            ParamGroup::B => "B",
            ParamGroup::Beta => "beta",
            ParamGroup::LmHead => "lm_head",
        }
    }

    /// Groups trained with the scaled-down low-rank learning rate.
    pub fn is_low_rank(self) -> bool {
        matches!(self, ParamGroup::A | ParamGroup::B | ParamGroup::Beta)
    }
}

/// Embedding, per-layer weights and output head. Also used, zero-initialised,
/// as the container for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensors {
    pub embed: Matrix,
    pub layers: Vec<Layer>,
    pub lm_head: Matrix,
}

impl Tensors {
    /// Flat views in canonical order: embed; then per layer and position
    /// either W or (A, B, beta); then lm_head.
    pub fn slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = vec![(ParamGroup::Embed, self.embed.data())];
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    for w in &d.w {
                        out.push((ParamGroup::W, w.data()));
                    }
                }
                Layer::Cross(c) => {
                    for p in 0..7 {
                        out.push((ParamGroup::A, c.a[p].data()));
                        out.push((ParamGroup::B, c.b[p].data()));
                        out.push((ParamGroup::Beta, std::slice::from_ref(&c.beta[p])));
                    }
                }
            }
        }
        out.push((ParamGroup::LmHead, self.lm_head.data()));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> =
            vec![(ParamGroup::Embed, self.embed.data_mut())];
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    for w in &mut d.w {
                        out.push((ParamGroup::W, w.data_mut()));
                    }
                }
                Layer::Cross(c) => {
                    for ((a, b), beta) in c.a.iter_mut().zip(c.b.iter_mut()).zip(c.beta.iter_mut()) {
                        out.push((ParamGroup::A, a.data_mut()));
                        out.push((ParamGroup::B, b.data_mut()));
                        out.push((ParamGroup::Beta, std::slice::from_mut(beta)));
                    }
                }
            }
        }
        out.push((ParamGroup::LmHead, self.lm_head.data_mut()));
        out
    }

    pub fn zeros_like(&self) -> Tensors {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Tensors {
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|layer| match layer {
                    Layer::Dense(d) => Layer::Dense(DenseLayer {
                        w: std::array::from_fn(|p| z(&d.w[p])),
                    }),
                    Layer::Cross(c) => Layer::Cross(CrossLayer {
                        a: std::array::from_fn(|p| z(&c.a[p])),
                        b: std::array::from_fn(|p| z(&c.b[p])),
                        beta: [0.0; 7],
                    }),
                })
                .collect(),
            lm_head: z(&self.lm_head),
        }
    }

    pub fn element_count(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha·other`, elementwise. Structures must match.
    pub fn axpy_assign(&mut self, alpha: f64, other: &Tensors) -> Result<()> {
        let src = other.slices();
        let mut dst = self.slices_mut();
        if src.len() != dst.len() {
            return Err(invalid("tensor sets have different layouts"));
        }
        for ((_, d), (_, s)) in dst.iter_mut().zip(&src) {
            if d.len() != s.len() {
                return Err(invalid("tensor sets have different shapes"));
            }
            for (x, y) in d.iter_mut().zip(s.iter()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, alpha: f64) {
        for (_, s) in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Model weights together with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub tensors: Tensors,
}

impl Params {
    /// W and A ~ N(0, 1/sqrt(fan_in)), B = 0, beta = 1, embed and lm_head
    /// ~ N(0, 0.02). Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config;
        let embed = Matrix::randn(cfg.vocab, cfg.hidden, 0.02, &mut rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let dense = l == 1 || cfg.arch == Arch::FullRank;
            if dense {
                let w = std::array::from_fn(|p| {
                    let pos = POSITIONS[p];
                    let fan_in = pos.in_dim(cfg);
                    Matrix::randn(fan_in, pos.out_dim(cfg), 1.0 / (fan_in as f64).sqrt(), &mut rng)
                });
                layers.push(Layer::Dense(DenseLayer { w }));
            } else {
                let r = cfg.rank(l);
                let a = std::array::from_fn(|p| {
                    let fan_in = POSITIONS[p].in_dim(cfg);
                    Matrix::randn(fan_in, r, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                });
                let b = std::array::from_fn(|p| Matrix::zeros(r, POSITIONS[p].out_dim(cfg)));
                layers.push(Layer::Cross(CrossLayer {
                    a,
                    b,
                    beta: [1.0; 7],
                }));
            }
        }
        let lm_head = Matrix::randn(cfg.hidden, cfg.vocab, 0.02, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            tensors: Tensors {
                embed,
                layers,
                lm_head,
            },
        })
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.tensors.layers[l - 1]
    }

    /// Fills B with N(0, 1/sqrt(r)) entries and draws every beta with
    /// magnitude in `[beta_min, beta_max]` and random sign. Gives gradient
    /// and recomputation tests a state where every path is active.
    pub fn randomize_low_rank(&mut self, seed: u64, beta_min: f64, beta_max: f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.tensors.layers {
            if let Layer::Cross(c) = layer {
                for p in 0..7 {
                    let (r, n) = c.b[p].shape();
                    c.b[p] = Matrix::randn(r, n, 1.0 / (r as f64).sqrt(), &mut rng);
                    let mag = rng.random_range(beta_min..=beta_max);
                    c.beta[p] = if rng.random_bool(0.5) { mag } else { -mag };
                }
            }
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() || tokens.len() > cfg.seq_len {
            return Err(invalid(format!(
                "sequence length {} must be in 1..={}",
                tokens.len(),
                cfg.seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(invalid(format!("token id {t} >= vocab {}", cfg.vocab)));
        }
        Ok(())
    }

    /// Embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[usize]) -> Matrix {
        let h = self.config.hidden;
        let mut x = Matrix::zeros(tokens.len(), h);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.tensors.embed.row(t));
        }
        x
    }
}

/// `tau(beta)·prev_y + (input·A)·B`, also returning the low-rank product
/// `input·A`.
pub fn linear_cross_parts(
    layer: &CrossLayer,
    pos: Position,
    input: &Matrix,
    prev_y: &Matrix,
    epsilon: f64,
) -> Result<(Matrix, Matrix)> {
    let p = pos.index();
    let low = input.matmul(&layer.a[p])?;
    let delta = low.matmul(&layer.b[p])?;
    let y = Matrix::axpy(tau(layer.beta[p], epsilon), prev_y, &delta)?;
    Ok((y, low))
}

/// Cross-layer residual output of layer `l >= 2` at `pos`.
pub fn linear_cross(
    params: &Params,
    l: usize,
    pos: Position,
    input: &Matrix,
    prev_y: &Matrix,
) -> Result<Matrix> {
    match params.layer(l) {
        Layer::Cross(c) => Ok(linear_cross_parts(c, pos, input, prev_y, params.config.epsilon)?.0),
        Layer::Dense(_) => Err(invalid(format!("layer {l} has no cross-layer residual"))),
    }
}

/// Everything the backward pass needs from one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub x: Matrix,
    pub y: PerPosition<Matrix>,
    /// Post-softmax attention weights, one `s×s` matrix per head.
    pub att_scores: Vec<Matrix>,
    /// Concatenated head outputs (input of the O projection).
    pub att_heads: Matrix,
    /// `Y^O + X`, input of gate/up.
    pub att: Matrix,
    pub gate_silu: Matrix,
    /// `silu(Y^gate) ⊙ Y^up`, input of the down projection.
    pub x_down: Matrix,
    /// `X^P·A^P` for cross layers.
    pub low_rank: Option<PerPosition<Matrix>>,
}

impl LayerState {
    /// Layer output `X_{l+1} = Y^down + Att`.
    pub fn output(&self) -> Result<Matrix> {
        self.y[Position::Down.index()].add(&self.att)
    }

    /// The input each position's projection consumed.
    pub fn input(&self, pos: Position) -> &Matrix {
        match pos {
            Position::Q | Position::K | Position::V => &self.x,
            Position::O => &self.att_heads,
            Position::Gate | Position::Up => &self.att,
            Position::Down => &self.x_down,
        }
    }
}

/// Multi-head scaled dot-product attention over already-projected Q, K, V.
pub fn attention(
    yq: &Matrix,
    yk: &Matrix,
    yv: &Matrix,
    heads: usize,
    causal: bool,
) -> Result<(Vec<Matrix>, Matrix)> {
    let h = yq.cols();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    let mut out = Matrix::zeros(yq.rows(), h);
    for hd in 0..heads {
        let q = yq.column_block(hd * dh, dh)?;
        let k = yk.column_block(hd * dh, dh)?;
        let v = yv.column_block(hd * dh, dh)?;
        let logits = q.matmul_t(&k)?.scale(scale);
        let p = softmax_rows(&logits, causal)?;
        out.set_column_block(hd * dh, &p.matmul(&v)?)?;
        scores.push(p);
    }
    Ok((scores, out))
}

/// Attention and FFN intermediates from the layer input and the seven linear
/// outputs. Forward and recomputation both go through here so they agree
/// bit for bit.
pub fn rebuild_layer_state(
    cfg: &ModelConfig,
    x: Matrix,
    y: PerPosition<Matrix>,
    low_rank: Option<PerPosition<Matrix>>,
) -> Result<LayerState> {
    let (att_scores, att_heads) = attention(
        &y[Position::Q.index()],
        &y[Position::K.index()],
        &y[Position::V.index()],
        cfg.heads,
        cfg.causal,
    )?;
    let att = y[Position::O.index()].add(&x)?;
    let gate_silu = silu(&y[Position::Gate.index()]);
    let x_down = gate_silu.hadamard(&y[Position::Up.index()])?;
    Ok(LayerState {
        x,
        y,
        att_scores,
        att_heads,
        att,
        gate_silu,
        x_down,
        low_rank,
    })
}

/// One transformer block. `prev_y` must be the previous layer's linear
/// outputs when `layer` is a cross layer.
pub fn layer_forward(
    cfg: &ModelConfig,
    layer: &Layer,
    x: Matrix,
    prev_y: Option<&PerPosition<Matrix>>,
) -> Result<LayerState> {
    let s = x.rows();
    let mut ys: Vec<Matrix> = Vec::with_capacity(7);
    let mut lows: Vec<Matrix> = Vec::new();
    let mut project = |pos: Position, input: &Matrix| -> Result<Matrix> {
        match layer {
            Layer::Dense(d) => input.matmul(&d.w[pos.index()]),
            Layer::Cross(c) => {
                let prev = prev_y.ok_or_else(|| invalid("cross layer needs previous outputs"))?;
                let (y, low) =
                    linear_cross_parts(c, pos, input, &prev[pos.index()], cfg.epsilon)?;
                lows.push(low);
                Ok(y)
            }
        }
    };

    for pos in [Position::Q, Position::K, Position::V] {
        ys.push(project(pos, &x)?);
    }
    let (att_scores, att_heads) = attention(&ys[0], &ys[1], &ys[2], cfg.heads, cfg.causal)?;
    ys.push(project(Position::O, &att_heads)?);
    let att = ys[Position::O.index()].add(&x)?;
    ys.push(project(Position::Gate, &att)?);
    ys.push(project(Position::Up, &att)?);
    let gate_silu = silu(&ys[Position::Gate.index()]);
    let x_down = gate_silu.hadamard(&ys[Position::Up.index()])?;
    ys.push(project(Position::Down, &x_down)?);
    debug_assert_eq!(ys[6].shape(), (s, cfg.hidden));

    let y: PerPosition<Matrix> = ys.try_into().expect("seven projections");
    let low_rank = if lows.is_empty() {
        None
    } else {
        Some(lows.try_into().expect("seven low-rank products"))
    };
    Ok(LayerState {
        x,
        y,
        att_scores,
        att_heads,
        att,
        gate_silu,
        x_down,
        low_rank,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheMode {
    /// Keep every intermediate of every layer.
    Full,
    /// Keep layer inputs, low-rank products for layers >= 2, and linear
    /// outputs only for layers in the plan.
    Selective(CheckpointPlan),
}

/// Stored activations of one layer; absent entries are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerRecord {
    pub x: Option<Matrix>,
    pub y: Option<PerPosition<Matrix>>,
    pub att_scores: Option<Vec<Matrix>>,
    pub att_heads: Option<Matrix>,
    pub ffn_gate_silu: Option<Matrix>,
    pub low_rank_out: Option<PerPosition<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub mode: CacheMode,
    pub tokens: Vec<usize>,
    /// Index `l - 1` holds layer `l`.
    pub layers: Vec<LayerRecord>,
    /// `X_{L+1}`; only kept in full mode.
    pub final_hidden: Option<Matrix>,
}

impl ActivationCache {
    /// Total number of stored f64 values, excluding the final hidden state.
    pub fn stored_layer_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|r| {
                let one = |m: &Option<Matrix>| m.as_ref().map_or(0, Matrix::len);
                let seven = |m: &Option<PerPosition<Matrix>>| {
                    m.as_ref().map_or(0, |a| a.iter().map(Matrix::len).sum())
                };
                one(&r.x)
                    + seven(&r.y)
                    + r.att_scores
                        .as_ref()
                        .map_or(0, |v| v.iter().map(Matrix::len).sum())
                    + one(&r.att_heads)
                    + one(&r.ffn_gate_silu)
                    + seven(&r.low_rank_out)
            })
            .sum()
    }

    pub fn stored_elements(&self) -> usize {
        self.stored_layer_elements() + self.final_hidden.as_ref().map_or(0, Matrix::len)
    }

    /// Reassembles a layer's full state from a full-mode cache.
    pub fn full_state(&self, cfg: &ModelConfig, l: usize) -> Result<LayerState> {
        let rec = &self.layers[l - 1];
        let missing = |what| Error::MissingActivation {
            layer: l,
            position: "*",
            what,
        };
        let x = rec.x.clone().ok_or_else(|| missing("layer input"))?;
        let y = rec.y.clone().ok_or_else(|| missing("linear outputs"))?;
        let att_scores = rec.att_scores.clone().ok_or_else(|| missing("attention scores"))?;
        let att_heads = rec.att_heads.clone().ok_or_else(|| missing("attention heads"))?;
        let gate_silu = rec.ffn_gate_silu.clone().ok_or_else(|| missing("ffn gate"))?;
        let att = y[Position::O.index()].add(&x)?;
        let x_down = gate_silu.hadamard(&y[Position::Up.index()])?;
        let _ = cfg;
        Ok(LayerState {
            x,
            y,
            att_scores,
            att_heads,
            att,
            gate_silu,
            x_down,
            low_rank: rec.low_rank_out.clone(),
        })
    }
}

fn logits_from_hidden(params: &Params, hidden: &Matrix) -> Result<Matrix> {
    hidden.matmul(&params.tensors.lm_head)
}

/// Runs the model on one sequence and returns `s × vocab` logits with the
/// requested activation cache.
pub fn forward(params: &Params, tokens: &[usize], mode: CacheMode) -> Result<(Matrix, ActivationCache)> {
    params.check_tokens(tokens)?;
    let cfg = &params.config;
    if let CacheMode::Selective(plan) = &mode {
        if cfg.arch != Arch::CrNet {
            return Err(invalid("selective caching requires the cross-layer architecture"));
        }
        plan.validate(cfg.layers)?;
    }
    let mut x = params.embed(tokens);
    let mut prev_y: Option<PerPosition<Matrix>> = None;
    let mut records = Vec::with_capacity(cfg.layers);
    for (idx, layer) in params.tensors.layers.iter().enumerate() {
        let l = idx + 1;
        let state = layer_forward(cfg, layer, x, prev_y.as_ref())?;
        let next = state.output()?;
        let record = match &mode {
            CacheMode::Full => LayerRecord {
                x: Some(state.x),
                y: Some(state.y.clone()),
                att_scores: Some(state.att_scores),
                att_heads: Some(state.att_heads),
                ffn_gate_silu: Some(state.gate_silu),
                low_rank_out: state.low_rank,
            },
            CacheMode::Selective(plan) => LayerRecord {
                x: Some(state.x),
                y: plan.contains(l).then(|| state.y.clone()),
                low_rank_out: state.low_rank,
                ..Default::default()
            },
        };
        records.push(record);
        prev_y = Some(state.y);
        x = next;
    }
    let logits = logits_from_hidden(params, &x)?;
    let final_hidden = matches!(mode, CacheMode::Full).then_some(x);
    Ok((
        logits,
        ActivationCache {
            mode,
            tokens: tokens.to_vec(),
            layers: records,
            final_hidden,
        },
    ))
}

/// Forward pass of the dense baseline: every layer must hold full weights.
pub fn forward_full_rank(params: &Params, tokens: &[usize]) -> Result<(Matrix, ActivationCache)> {
    if params
        .tensors
        .layers
        .iter()
        .any(|l| matches!(l, Layer::Cross(_)))
    {
        return Err(invalid("full-rank forward needs dense weights in every layer"));
    }
    forward(params, tokens, CacheMode::Full)
}

/// Logits only, without keeping activations beyond the running layer.
pub fn logits(params: &Params, tokens: &[usize]) -> Result<Matrix> {
    params.check_tokens(tokens)?;
    let cfg = &params.config;
    let mut x = params.embed(tokens);
    let mut prev_y: Option<PerPosition<Matrix>> = None;
    for layer in &params.tensors.layers {
        let state = layer_forward(cfg, layer, x, prev_y.as_ref())?;
        x = state.output()?;
        prev_y = Some(state.y);
    }
    logits_from_hidden(params, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny(arch: Arch, layers: usize) -> ModelConfig {
        ModelConfig::uniform(layers, 8, 16, 1, 2, 11, 5, arch)
    }

    /// Straight-line evaluation with explicit loops, heads = 1 only.
    fn oracle_logits(params: &Params, tokens: &[usize]) -> Vec<Vec<f64>> {
        let cfg = &params.config;
        let (s, h) = (tokens.len(), cfg.hidden);
        type M = Vec<Vec<f64>>;
        let mm = |a: &M, b: &Matrix| -> M {
            (0..a.len())
                .map(|i| {
                    (0..b.cols())
                        .map(|j| (0..b.rows()).map(|k| a[i][k] * b.get(k, j)).sum())
                        .collect()
                })
                .collect()
        };
        let add = |a: &M, b: &M| -> M {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
                .collect()
        };
        let scale = |a: &M, c: f64| -> M { a.iter().map(|r| r.iter().map(|v| v * c).collect()).collect() };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

        let mut x: M = tokens.iter().map(|&t| cfg_row(&params.tensors.embed, t)).collect();
        let mut prev: Option<Vec<M>> = None;
        for layer in &params.tensors.layers {
            let lin = |p: usize, input: &M, prev: &Option<Vec<M>>| -> M {
                match layer {
                    Layer::Dense(d) => mm(input, &d.w[p]),
                    Layer::Cross(c) => {
                        let t = tau(c.beta[p], cfg.epsilon);
                        let low = mm(&mm(input, &c.a[p]), &c.b[p]);
                        add(&scale(&prev.as_ref().unwrap()[p], t), &low)
                    }
                }
            };
            let q = lin(0, &x, &prev);
            let k = lin(1, &x, &prev);
            let v = lin(2, &x, &prev);
            let mut heads = vec![vec![0.0; h]; s];
            for i in 0..s {
                let lim = if cfg.causal { i + 1 } else { s };
                let sc: Vec<f64> = (0..lim)
                    .map(|j| (0..h).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (h as f64).sqrt())
                    .collect();
                let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = sc.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..lim {
                    for c in 0..h {
                        heads[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
            let o = lin(3, &heads, &prev);
            let att = add(&o, &x);
            let g = lin(4, &att, &prev);
            let u = lin(5, &att, &prev);
            let xd: M = g
                .iter()
                .zip(&u)
                .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a * sig(*a) * b).collect())
                .collect();
            let d = lin(6, &xd, &prev);
            x = add(&d, &att);
            prev = Some(vec![q, k, v, o, g, u, d]);
        }
        mm(&x, &params.tensors.lm_head)
    }

    fn cfg_row(m: &Matrix, i: usize) -> Vec<f64> {
        m.row(i).to_vec()
    }

    fn max_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
        let mut d = 0.0f64;
        for (i, row) in b.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                d = d.max((a.get(i, j) - v).abs());
            }
        }
        d
    }

    #[test]
    fn tau_values() {
        assert_eq!(tau(1.0, 1e-6), 1.000001);
        assert_eq!(tau(-2.0, 1e-6), -2.000001);
        assert_eq!(tau(0.0, 1e-6), 1e-6);
    }

    #[test]
    fn init_is_deterministic_with_zero_b() {
        let cfg = tiny(Arch::CrNet, 3);
        let a = Params::init(&cfg, 9).unwrap();
        let b = Params::init(&cfg, 9).unwrap();
        assert_eq!(a, b);
        for layer in &a.tensors.layers[1..] {
            let Layer::Cross(c) = layer else { panic!("expected cross layer") };
            assert!(c.b.iter().all(|b| b.max_abs() == 0.0));
            assert_eq!(c.beta, [1.0; 7]);
        }
        assert_ne!(a, Params::init(&cfg, 10).unwrap());
    }

    #[test]
    fn init_weight_std_matches_fan_in() {
        let cfg = ModelConfig::uniform(1, 512, 64, 1, 1, 2, 1, Arch::CrNet);
        let p = Params::init(&cfg, 1).unwrap();
        let Layer::Dense(d) = &p.tensors.layers[0] else { panic!() };
        let w = &d.w[0];
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 1.0 / 512f64.sqrt();
        assert!((var.sqrt() - target).abs() <= 0.1 * target);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(Arch::CrNet, 3);
        assert!(cfg.validate().is_ok());
        cfg.ranks = vec![2];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(Arch::CrNet, 3);
        cfg.ranks = vec![2, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(Arch::CrNet, 3);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn linear_cross_cases() {
        let cfg = tiny(Arch::CrNet, 2);
        let mut params = Params::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Matrix::randn(4, 8, 1.0, &mut rng);
        let prev = Matrix::randn(4, 8, 1.0, &mut rng);
        let out = linear_cross(&params, 2, Position::Q, &input, &prev).unwrap();
        assert!(out.sub(&prev.scale(tau(1.0, 1e-6))).unwrap().max_abs() <= 1e-15);

        params.randomize_low_rank(5, 0.5, 1.5);
        let Layer::Cross(c) = params.layer(2).clone() else { panic!() };
        let zero = Matrix::zeros(4, 8);
        let pure = linear_cross(&params, 2, Position::Q, &input, &zero).unwrap();
        let ab = c.a[0].matmul(&c.b[0]).unwrap();
        assert!(pure.sub(&input.matmul(&ab).unwrap()).unwrap().max_abs() <= 1e-12);

        let out = linear_cross(&params, 2, Position::Q, &input, &prev).unwrap();
        let dense = Matrix::axpy(tau(c.beta[0], 1e-6), &prev, &input.matmul(&ab).unwrap()).unwrap();
        assert!(out.sub(&dense).unwrap().max_abs() <= 1e-12);

        let bad = Matrix::zeros(4, 7);
        assert!(linear_cross(&params, 2, Position::Q, &bad, &prev).is_err());
        assert!(linear_cross(&params, 1, Position::Q, &input, &prev).is_err());
    }

    #[test]
    fn linear_cross_is_affine_in_prev() {
        let cfg = tiny(Arch::CrNet, 2);
        let mut params = Params::init(&cfg, 3).unwrap();
        params.randomize_low_rank(1, 0.5, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = Matrix::randn(5, 16, 1.0, &mut rng);
            let y1 = Matrix::randn(5, 8, 1.0, &mut rng);
            let y2 = Matrix::randn(5, 8, 1.0, &mut rng);
            let (alpha, gamma): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let f = |y: &Matrix| linear_cross(&params, 2, Position::Down, &x, y).unwrap();
            let combo = Matrix::axpy(alpha, &y1, &y2.scale(gamma)).unwrap();
            let lhs = f(&combo);
            let rhs = f(&y1)
                .scale(alpha)
                .add(&f(&y2).scale(gamma))
                .unwrap()
                .sub(&f(&Matrix::zeros(5, 8)).scale(alpha + gamma - 1.0))
                .unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn single_layer_models_agree() {
        let cr = tiny(Arch::CrNet, 1);
        let fr = tiny(Arch::FullRank, 1);
        let pc = Params::init(&cr, 2).unwrap();
        let mut pf = Params::init(&fr, 2).unwrap();
        pf.tensors = pc.tensors.clone();
        let tokens = [1, 4, 2, 9, 0];
        let (a, _) = forward(&pc, &tokens, CacheMode::Full).unwrap();
        let (b, _) = forward_full_rank(&pf, &tokens).unwrap();
        assert_eq!(a, b);
        let diff = max_diff(&a, &oracle_logits(&pc, &tokens));
        assert!(diff <= 1e-10);
    }

    #[test]
    fn init_state_copies_scaled_outputs() {
        let cfg = tiny(Arch::CrNet, 2);
        let params = Params::init(&cfg, 5).unwrap();
        let (_, cache) = forward(&params, &[3, 1, 4, 1, 5], CacheMode::Full).unwrap();
        let y1 = cache.layers[0].y.as_ref().unwrap();
        let y2 = cache.layers[1].y.as_ref().unwrap();
        for p in 0..7 {
            let d = y2[p].sub(&y1[p].scale(tau(1.0, cfg.epsilon))).unwrap();
            assert!(d.max_abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = tiny(Arch::CrNet, 3);
        let mut params = Params::init(&cfg, 17).unwrap();
        params.randomize_low_rank(18, 0.5, 1.5);
        let tokens = [2, 7, 7, 0, 10];
        let (logits, _) = forward(&params, &tokens, CacheMode::Full).unwrap();
        assert!(max_diff(&logits, &oracle_logits(&params, &tokens)) <= 1e-10);

        let fr = tiny(Arch::FullRank, 3);
        let pf = Params::init(&fr, 19).unwrap();
        let (lf, _) = forward_full_rank(&pf, &tokens).unwrap();
        assert!(lf.is_finite());
        assert!(max_diff(&lf, &oracle_logits(&pf, &tokens)) <= 1e-10);
        assert!(forward_full_rank(&params, &tokens).is_err());
    }

    #[test]
    fn rank_of_cross_difference_is_bounded() {
        let cfg = ModelConfig::uniform(3, 16, 24, 2, 3, 13, 12, Arch::CrNet);
        let mut params = Params::init(&cfg, 1).unwrap();
        params.randomize_low_rank(2, 0.3, 1.2);
        let tokens: Vec<usize> = (0..12).map(|i| (i * 5) % 13).collect();
        let (_, cache) = forward(&params, &tokens, CacheMode::Full).unwrap();
        for l in 2..=3 {
            let Layer::Cross(c) = params.layer(l) else { panic!() };
            let prev = cache.layers[l - 2].y.as_ref().unwrap();
            let cur = cache.layers[l - 1].y.as_ref().unwrap();
            for p in 0..7 {
                let diff = cur[p].sub(&prev[p].scale(tau(c.beta[p], cfg.epsilon))).unwrap();
                let sv = crate::tensor::svd(&diff).unwrap().sigma;
                assert!(sv[3] <= 1e-9 * sv[0], "layer {l} pos {p}: {sv:?}");
            }
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let cfg = ModelConfig::uniform(3, 8, 16, 2, 2, 11, 6, Arch::CrNet);
        let mut params = Params::init(&cfg, 8).unwrap();
        params.randomize_low_rank(9, 0.5, 1.5);
        let a = [1, 2, 3, 4, 5, 6];
        let b = [1, 2, 3, 10, 0, 9];
        let la = logits(&params, &a).unwrap();
        let lb = logits(&params, &b).unwrap();
        for t in 0..3 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn token_validation() {
        let params = Params::init(&tiny(Arch::CrNet, 2), 0).unwrap();
        assert!(forward(&params, &[11], CacheMode::Full).is_err());
        assert!(forward(&params, &[0; 6], CacheMode::Full).is_err());
        assert!(forward(&params, &[], CacheMode::Full).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let params = Params::init(&tiny(Arch::CrNet, 3), 4).unwrap();
        let t = [0, 1, 2, 3, 4];
        assert_eq!(logits(&params, &t).unwrap(), logits(&params, &t).unwrap());
        let (l2, _) = forward(&params, &t, CacheMode::Full).unwrap();
        assert_eq!(logits(&params, &t).unwrap(), l2);
    }

    #[test]
    fn tensor_slices_cover_every_parameter() {
        let cfg = tiny(Arch::CrNet, 3);
        let p = Params::init(&cfg, 0).unwrap();
        let h = 8;
        let hff = 16;
        let r = 2;
        let first = 4 * h * h + 3 * h * hff;
        let rest = 2 * (11 * h * r + 3 * hff * r + 7);
        let emb = 2 * 11 * h;
        assert_eq!(p.tensors.element_count(), first + rest + emb);
    }
}
