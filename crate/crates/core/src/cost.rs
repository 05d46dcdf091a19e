//! Closed-form parameter, memory, FLOP and pipeline accounting.
//!
//! Every count is evaluated in `u128` and every reported total is the exact
//! sum of its named terms. Per-sequence quantities are multiplied by the batch
//! only where the name says so.

use crate::error::{invalid, Error, Result};
use crate::recompute::select_checkpoints;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::str::FromStr;

pub const GIB: f64 = (1u64 << 30) as f64;

/// Nonzero fraction of the sparse factor in SLTrain, in thousandths.
pub const SLTRAIN_DENSITY_PERMILLE: u128 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullRank,
    Lora,
    Relora,
    Sltrain,
    Galore,
    Cola,
    Crnet,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FullRank,
        Method::Lora,
        Method::Relora,
        Method::Sltrain,
        Method::Galore,
        Method::Cola,
        Method::Crnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullRank => "full_rank",
            Method::Lora => "lora",
            Method::Relora => "relora",
            Method::Sltrain => "sltrain",
            Method::Galore => "galore",
            Method::Cola => "cola",
            Method::Crnet => "crnet",
        }
    }

    pub fn uses_rank(self) -> bool {
        self != Method::FullRank
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcpMode {
    None,
    Vanilla,
    ColaM,
    CrnetRecompute,
}

impl GcpMode {
    pub const ALL: [GcpMode; 4] = [
        GcpMode::None,
        GcpMode::Vanilla,
        GcpMode::ColaM,
        GcpMode::CrnetRecompute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GcpMode::None => "none",
            GcpMode::Vanilla => "vanilla",
            GcpMode::ColaM => "cola_m",
            GcpMode::CrnetRecompute => "crnet_recompute",
        }
    }

    /// The checkpointing scheme each method is normally paired with.
    pub fn default_for(method: Method) -> GcpMode {
        match method {
            Method::Cola => GcpMode::ColaM,
            Method::Crnet => GcpMode::CrnetRecompute,
            _ => GcpMode::None,
        }
    }
}

impl FromStr for GcpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GcpMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown gcp mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub vocab: usize,
    pub batch: usize,
    pub bytes_per_value: usize,
    /// Rank of every low-rank factor unless `rank_schedule` is set.
    pub rank: usize,
    /// Per-layer ranks of CR-Net layers `2..=layers`.
    #[serde(default)]
    pub rank_schedule: Option<Vec<usize>>,
    /// Number of layers whose outputs are kept under CR-Net recomputation.
    pub checkpoints: usize,
    pub method: Method,
    pub gcp_mode: GcpMode,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("seq_len", self.seq_len),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("batch", self.batch),
            ("bytes_per_value", self.bytes_per_value),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.checkpoints > self.layers {
            return Err(invalid(format!(
                "checkpoints {} exceed layers {}",
                self.checkpoints, self.layers
            )));
        }
        if let Some(s) = &self.rank_schedule {
            if s.len() != self.layers - 1 {
                return Err(invalid(format!(
                    "rank schedule has {} entries, expected {}",
                    s.len(),
                    self.layers - 1
                )));
            }
        }
        if self.method.uses_rank() {
            let cap = self.hidden.min(self.ffn_hidden);
            let mut ranks = vec![self.rank];
            if self.method == Method::Crnet {
                ranks.extend(self.rank_schedule.iter().flatten().copied());
            }
            if let Some(r) = ranks.into_iter().find(|&r| r == 0 || r >= cap) {
                return Err(invalid(format!("rank {r} must satisfy 1 <= r < {cap}")));
            }
        }
        Ok(())
    }

    /// CR-Net rank of layer `l`; layer 1 takes the rank of layer 2 when it is
    /// charged as a recomputed low-rank layer.
    pub fn crnet_rank(&self, l: usize) -> usize {
        match &self.rank_schedule {
            Some(s) if !s.is_empty() => s[l.max(2) - 2],
            _ => self.rank,
        }
    }

    /// Layers whose outputs are rebuilt during CR-Net recomputation.
    pub fn recomputed_layers(&self) -> Result<Vec<usize>> {
        let (l, b) = (self.layers, self.checkpoints);
        if b == 0 {
            return Ok((1..=l).collect());
        }
        if b >= l {
            return Ok(Vec::new());
        }
        let plan = select_checkpoints(l, b)?;
        Ok((1..=l).filter(|&x| !plan.contains(x)).collect())
    }
}

/// One named additive contribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: u128,
}

/// A total together with the terms it is the exact sum of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub total: u128,
    pub terms: Vec<Term>,
}

impl Quantity {
    pub fn from_terms(terms: Vec<(String, u128)>) -> Self {
        let terms: Vec<Term> = terms
            .into_iter()
            .map(|(name, value)| Term { name, value })
            .collect();
        let total = terms.iter().map(|t| t.value).sum();
        Self { total, terms }
    }

    fn scaled(&self, factor: u128, suffix: &str) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .map(|t| (format!("{}{suffix}", t.name), t.value * factor))
                .collect(),
        )
    }

    pub fn sum_of_terms(&self) -> u128 {
        self.terms.iter().map(|t| t.value).sum()
    }
}

fn t(name: impl Into<String>, value: u128) -> (String, u128) {
    (name.into(), value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Transformer blocks only.
    pub core: Quantity,
    /// Untied input embedding and output head.
    pub embeddings: u128,
    pub total: u128,
}

struct Dims {
    l: u128,
    h: u128,
    f: u128,
    s: u128,
    r: u128,
}

fn dims(cfg: &CostConfig) -> Dims {
    Dims {
        l: cfg.layers as u128,
        h: cfg.hidden as u128,
        f: cfg.ffn_hidden as u128,
        s: cfg.seq_len as u128,
        r: cfg.rank as u128,
    }
}

fn crnet_ranks(cfg: &CostConfig) -> impl Iterator<Item = u128> + '_ {
    (2..=cfg.layers).map(|l| cfg.crnet_rank(l) as u128)
}

pub fn param_count(cfg: &CostConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let Dims { l, h, f, r, .. } = dims(cfg);
    let dense_layer = 4 * h * h + 3 * h * f;
    let factor_layer = 11 * h * r + 3 * f * r;
    let terms = match cfg.method {
        Method::FullRank | Method::Galore => vec![t("dense layers L(4h^2+3h*h_ff)", l * dense_layer)],
        Method::Lora | Method::Relora => vec![
            t("dense layers L(4h^2+3h*h_ff)", l * dense_layer),
            t("adapters L(11hr+3h_ff*r)", l * factor_layer),
        ],
        Method::Cola => vec![t("factors L(11hr+3h_ff*r)", l * factor_layer)],
        Method::Sltrain => vec![
            t("factors L(11hr+3h_ff*r)", l * factor_layer),
            t(
                "sparse values density*L(4h^2+3h*h_ff)",
                (l * dense_layer * SLTRAIN_DENSITY_PERMILLE + 500) / 1000,
            ),
        ],
        Method::Crnet => vec![
            t("first layer 4h^2+3h*h_ff", dense_layer),
            t(
                "cross layers sum(11h*r_l+3h_ff*r_l)",
                crnet_ranks(cfg).map(|r| 11 * h * r + 3 * f * r).sum(),
            ),
            t("cross-layer scales 7(L-1)", 7 * (l - 1)),
        ],
    };
    let core = Quantity::from_terms(terms);
    let embeddings = 2 * cfg.vocab as u128 * h;
    Ok(ParamCount {
        total: core.total + embeddings,
        embeddings,
        core,
    })
}

/// Adam state plus weights and gradients: four values per parameter.
pub fn optimizer_memory(cfg: &CostConfig) -> Result<Quantity> {
    let p = param_count(cfg)?;
    let mut q = p.core.scaled(4 * cfg.bytes_per_value as u128, " x4 x bytes");
    q.terms.push(Term {
        name: "embeddings x4 x bytes".into(),
        value: 4 * cfg.bytes_per_value as u128 * p.embeddings,
    });
    q.total = q.sum_of_terms();
    Ok(q)
}

/// Forward plus backward FLOPs of the transformer blocks for one sequence.
pub fn step_flops(cfg: &CostConfig) -> Result<Quantity> {
    cfg.validate()?;
    let Dims { l, h, f, s, r } = dims(cfg);
    let dense = 24 * s * h * h + 12 * s * s * h + 18 * s * h * f;
    let terms = match cfg.method {
        Method::FullRank => vec![t("L(24sh^2+12s^2h+18sh*h_ff)", l * dense)],
        Method::Lora | Method::Relora => vec![t(
            "L(40sh^2+24s^2h+30sh*h_ff)",
            l * (40 * s * h * h + 24 * s * s * h + 30 * s * h * f),
        )],
        Method::Sltrain => vec![
            t("L(24sh^2+12s^2h+18sh*h_ff)", l * dense),
            t("L(24h^2r+18h*h_ff*r)", l * (24 * h * h * r + 18 * h * f * r)),
        ],
        Method::Galore => vec![
            t("L(24sh^2+12s^2h+18sh*h_ff)", l * dense),
            t("L(16h^2r+12h*h_ff*r)", l * (16 * h * h * r + 12 * h * f * r)),
        ],
        Method::Cola => vec![t(
            "L(48shr+12s^2h+18sr(h+h_ff))",
            l * (48 * s * h * r + 12 * s * s * h + 18 * s * r * (h + f)),
        )],
        Method::Crnet => vec![
            t("first layer 24sh^2+12s^2h+18sh*h_ff", dense),
            t(
                "cross layers sum(48sh*r_l+18s*r_l(h+h_ff))",
                crnet_ranks(cfg)
                    .map(|r| 48 * s * h * r + 18 * s * r * (h + f))
                    .sum(),
            ),
            t("cross layers attention (L-1)12s^2h", (l - 1) * 12 * s * s * h),
        ],
    };
    Ok(Quantity::from_terms(terms))
}

/// Output-head FLOPs for one sequence, kept apart from the block totals.
pub fn embedding_flops(cfg: &CostConfig) -> Quantity {
    let v = 2 * cfg.seq_len as u128 * cfg.hidden as u128 * cfg.vocab as u128;
    Quantity::from_terms(vec![t("lm_head forward 2sh*vocab", v), t("lm_head backward 2sh*vocab", v)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationCost {
    /// Stored activation elements for one sequence.
    pub memory_elements: Quantity,
    /// Extra forward FLOPs spent rebuilding activations for one sequence.
    pub recompute_flops: Quantity,
}

pub fn activation_cost(cfg: &CostConfig) -> Result<ActivationCost> {
    cfg.validate()?;
    let Dims { l, h, f, s, r } = dims(cfg);
    let heads = cfg.heads as u128;
    let attention = t("attention scores 4Ls^2h", 4 * l * s * s * h);
    let (mem, rec) = match (cfg.gcp_mode, cfg.method) {
        (GcpMode::None, Method::Cola | Method::Crnet) => {
            return Err(invalid(format!(
                "gcp mode none is only defined for full-width methods, not {}",
                cfg.method.name()
            )))
        }
        (GcpMode::None, _) => (
            vec![
                t("linear inputs and outputs 10Lsh", 10 * l * s * h),
                t("feed-forward 4Ls*h_ff", 4 * l * s * f),
                t("attention maps 2Ls^2*heads", 2 * l * s * s * heads),
            ],
            vec![],
        ),
        (GcpMode::Vanilla, _) => (
            vec![t("layer inputs Lsh", l * s * h)],
            vec![t("dense replay 24Lsh^2", 24 * l * s * h * h), attention],
        ),
        (GcpMode::ColaM, Method::Cola) => (
            vec![
                t("layer inputs and outputs 2Lsh", 2 * l * s * h),
                t("low-rank intermediates 7Lsr", 7 * l * s * r),
            ],
            vec![
                t("low-rank replay L(10shr+4s*h_ff*r)", l * (10 * s * h * r + 4 * s * f * r)),
                attention,
            ],
        ),
        (GcpMode::CrnetRecompute, Method::Crnet) => {
            let b = cfg.checkpoints as u128;
            let replay: u128 = cfg
                .recomputed_layers()?
                .into_iter()
                .map(|x| {
                    let r = cfg.crnet_rank(x) as u128;
                    10 * s * h * r + 4 * s * f * r
                })
                .sum();
            (
                vec![
                    t("layer inputs Lsh", l * s * h),
                    t("checkpointed outputs 5bsh+2bs*h_ff", 5 * b * s * h + 2 * b * s * f),
                    t(
                        "low-rank intermediates sum 7s*r_l",
                        crnet_ranks(cfg).map(|r| 7 * s * r).sum(),
                    ),
                ],
                vec![t("low-rank replay sum over l not in A (10sh*r_l+4s*h_ff*r_l)", replay), attention],
            )
        }
        (mode, method) => {
            return Err(invalid(format!(
                "gcp mode {} does not apply to method {}",
                mode.name(),
                method.name()
            )))
        }
    };
    Ok(ActivationCost {
        memory_elements: Quantity::from_terms(mem),
        recompute_flops: Quantity::from_terms(rec),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub param_count: ParamCount,
    pub optimizer_memory_bytes: Quantity,
    pub optimizer_memory_gib: f64,
    /// Per sequence.
    pub step_flops: Quantity,
    /// Per sequence, excluded from `step_flops`.
    pub embedding_flops: Quantity,
    pub activation_memory_elements: Quantity,
    pub recompute_flops: Quantity,
    /// `batch × (step_flops + recompute_flops)`.
    pub total_step_flops: u128,
}

pub fn cost_report(cfg: &CostConfig) -> Result<CostReport> {
    let act = activation_cost(cfg)?;
    let opt = optimizer_memory(cfg)?;
    let step = step_flops(cfg)?;
    Ok(CostReport {
        config: cfg.clone(),
        param_count: param_count(cfg)?,
        optimizer_memory_gib: opt.total as f64 / GIB,
        optimizer_memory_bytes: opt,
        total_step_flops: cfg.batch as u128 * (step.total + act.recompute_flops.total),
        step_flops: step,
        embedding_flops: embedding_flops(cfg),
        activation_memory_elements: act.memory_elements,
        recompute_flops: act.recompute_flops,
    })
}

/// Batch total of forward, backward and recomputation FLOPs.
pub fn total_step_flops(cfg: &CostConfig) -> Result<u128> {
    Ok(cost_report(cfg)?.total_step_flops)
}

fn sci(v: u128) -> String {
    format!("{:.4e}", v as f64)
}

impl CostReport {
    /// Plain-text table: one row per quantity, then its terms indented.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "method {} | gcp {} | L={} h={} h_ff={} s={} heads={} r={} b={} batch={} bytes={}",
            c.method.name(),
            c.gcp_mode.name(),
            c.layers,
            c.hidden,
            c.ffn_hidden,
            c.seq_len,
            c.heads,
            c.rank,
            c.checkpoints,
            c.batch,
            c.bytes_per_value
        );
        let rows: [(&str, &Quantity); 6] = [
            ("params (core)", &self.param_count.core),
            ("optimizer memory (bytes)", &self.optimizer_memory_bytes),
            ("step flops / sequence", &self.step_flops),
            ("embedding flops / sequence", &self.embedding_flops),
            ("activation memory (elements)", &self.activation_memory_elements),
            ("recompute flops / sequence", &self.recompute_flops),
        ];
        for (name, q) in rows {
            let _ = writeln!(out, "{name:<32} {:>14}", sci(q.total));
            for term in &q.terms {
                let _ = writeln!(out, "    {:<60} {:>14}", term.name, sci(term.value));
            }
        }
        let _ = writeln!(
            out,
            "{:<32} {:>14}",
            "params (with embeddings)",
            sci(self.param_count.total)
        );
        let _ = writeln!(out, "{:<32} {:>14.4}", "optimizer memory (GiB)", self.optimizer_memory_gib);
        let _ = writeln!(out, "{:<32} {:>14}", "total step flops (batch)", sci(self.total_step_flops));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub peak_flops: f64,
    pub bandwidth_bytes_per_s: f64,
    pub microbatch: usize,
    pub pp_size: usize,
    /// Boundary crossings per microbatch: forward, backward, recomputation.
    #[serde(default = "default_comm_passes")]
    pub comm_passes: usize,
}

fn default_comm_passes() -> usize {
    3
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.bandwidth_bytes_per_s > 0.0) {
            return Err(invalid("peak_flops and bandwidth must be positive"));
        }
        if self.microbatch == 0 || self.pp_size == 0 || self.comm_passes == 0 {
            return Err(invalid("microbatch, pp_size and comm_passes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub method: Method,
    pub compute_flops: f64,
    pub compute_time_s: f64,
    /// Elements per sequence crossing one stage boundary.
    pub comm_dimension: u128,
    pub comm_volume_bytes: u128,
    pub comm_volume_gib: f64,
    pub comm_volume_gb: f64,
    pub comm_time_s: f64,
    /// Activation memory per stage relative to full-rank vanilla
    /// checkpointing, in GiB.
    pub hbm_delta_gib: f64,
    pub notes: Vec<String>,
}

/// Compute and boundary-communication cost of one microbatch.
///
/// Full-rank compute carries a 4/3 factor for the replayed forward pass of
/// vanilla checkpointing. CR-Net sends the layer input plus the seven
/// per-position output streams across each boundary.
pub fn pipeline_report(pcfg: &PipelineConfig, cfg: &CostConfig) -> Result<PipelineReport> {
    pcfg.validate()?;
    let micro = pcfg.microbatch as u128;
    let (s, h, f) = (cfg.seq_len as u128, cfg.hidden as u128, cfg.ffn_hidden as u128);
    let step = step_flops(cfg)?.total;
    let mut notes = Vec::new();
    let (compute_flops, comm_dimension, act_mem) = match cfg.method {
        Method::FullRank => {
            notes.push("compute includes a 4/3 factor for the replayed forward pass".into());
            let act = activation_cost(&CostConfig {
                gcp_mode: GcpMode::Vanilla,
                ..cfg.clone()
            })?;
            ((micro * step * 4) as f64 / 3.0, s * h, act.memory_elements.total)
        }
        Method::Crnet => {
            notes.push(format!(
                "compute includes recomputation with {} checkpointed layers",
                cfg.checkpoints
            ));
            notes.push("boundary carries X plus seven output streams: 6sh + 2s*h_ff".into());
            let act = activation_cost(&CostConfig {
                gcp_mode: GcpMode::CrnetRecompute,
                ..cfg.clone()
            })?;
            (
                (micro * (step + act.recompute_flops.total)) as f64,
                6 * s * h + 2 * s * f,
                act.memory_elements.total,
            )
        }
        m => {
            return Err(invalid(format!(
                "pipeline report supports full_rank and crnet, not {}",
                m.name()
            )))
        }
    };
    let bytes_per = cfg.bytes_per_value as u128;
    let comm_volume_bytes = micro * comm_dimension * bytes_per * pcfg.comm_passes as u128;
    let baseline = cfg.layers as u128 * s * h;
    let hbm_delta_gib = (act_mem as f64 - baseline as f64) * (micro * bytes_per) as f64
        / pcfg.pp_size as f64
        / GIB;
    Ok(PipelineReport {
        method: cfg.method,
        compute_flops,
        compute_time_s: compute_flops / pcfg.peak_flops,
        comm_dimension,
        comm_volume_bytes,
        comm_volume_gib: comm_volume_bytes as f64 / GIB,
        comm_volume_gb: comm_volume_bytes as f64 / 1e9,
        comm_time_s: comm_volume_bytes as f64 / pcfg.bandwidth_bytes_per_s,
        hbm_delta_gib,
        notes,
    })
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method             {}", self.method.name());
        let _ = writeln!(out, "compute flops      {:.4e}", self.compute_flops);
        let _ = writeln!(out, "compute time (s)   {:.4}", self.compute_time_s);
        let _ = writeln!(out, "comm dimension     {}", self.comm_dimension);
        let _ = writeln!(out, "comm volume (GiB)  {:.4}", self.comm_volume_gib);
        let _ = writeln!(out, "comm volume (GB)   {:.4}", self.comm_volume_gb);
        let _ = writeln!(out, "comm time (s)      {:.4}", self.comm_time_s);
        let _ = writeln!(out, "hbm delta (GiB)    {:.4}", self.hbm_delta_gib);
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
