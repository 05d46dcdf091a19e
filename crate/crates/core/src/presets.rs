//! Named model and cost configurations.

use crate::cost::{CostConfig, GcpMode, Method, PipelineConfig};
use crate::error::{invalid, Result};
use crate::model::{Arch, ModelConfig};

pub const PRESET_NAMES: [&str; 8] = [
    "tiny",
    "toy",
    "llama2-60m",
    "llama2-130m",
    "llama2-350m",
    "llama2-1b",
    "llama2-7b",
    "llama2-13b",
];

/// Vocabulary of the published LLaMA-2 tokenizer.
pub const LLAMA_VOCAB: usize = 32000;
/// Sequence length used for the per-step FLOP tables.
pub const LLAMA_SEQ_LEN: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelConfig,
    pub cost: CostConfig,
}

struct Shape {
    hidden: usize,
    ffn: usize,
    heads: usize,
    layers: usize,
    /// `(last layer, rank)` bands starting at layer 2.
    bands: &'static [(usize, usize)],
}

fn llama_shape(name: &str) -> Option<Shape> {
    let s = |hidden, ffn, heads, layers, bands| Shape {
        hidden,
        ffn,
        heads,
        layers,
        bands,
    };
    Some(match name {
        "llama2-60m" => s(512, 1376, 8, 8, &[(4, 96), (8, 112)]),
        "llama2-130m" => s(768, 2048, 12, 12, &[(4, 192), (12, 224)]),
        "llama2-350m" => s(1024, 2736, 16, 24, &[(16, 224), (24, 256)]),
        "llama2-1b" => s(2048, 5461, 32, 24, &[(24, 448)]),
        "llama2-7b" => s(4096, 11008, 32, 32, &[(32, 896)]),
        "llama2-13b" => s(5120, 13653, 40, 40, &[(40, 1260)]),
        _ => return None,
    })
}

fn schedule(layers: usize, bands: &[(usize, usize)]) -> Vec<usize> {
    (2..=layers)
        .map(|l| bands.iter().find(|(last, _)| l <= *last).map_or(0, |b| b.1))
        .collect()
}

fn cost_from_model(m: &ModelConfig, batch: usize, checkpoints: usize) -> CostConfig {
    CostConfig {
        layers: m.layers,
        hidden: m.hidden,
        ffn_hidden: m.ffn_hidden,
        seq_len: m.seq_len,
        heads: m.heads,
        vocab: m.vocab,
        batch,
        bytes_per_value: 2,
        rank: m.ranks.iter().copied().max().unwrap_or(1),
        rank_schedule: Some(m.ranks.clone()),
        checkpoints,
        method: Method::Crnet,
        gcp_mode: GcpMode::CrnetRecompute,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let (name, model, batch) = match name {
        "tiny" => ("tiny", ModelConfig::uniform(3, 8, 16, 1, 2, 11, 5, Arch::CrNet), 1),
        "toy" => ("toy", ModelConfig::uniform(4, 64, 172, 4, 16, 256, 64, Arch::CrNet), 8),
        _ => {
            let shape = llama_shape(name).ok_or_else(|| {
                invalid(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                ))
            })?;
            let n = PRESET_NAMES.iter().copied().find(|n| *n == name).unwrap_or("llama2");
            let mut m = ModelConfig::uniform(
                shape.layers,
                shape.hidden,
                shape.ffn,
                shape.heads,
                1,
                LLAMA_VOCAB,
                LLAMA_SEQ_LEN,
                Arch::CrNet,
            );
            m.ranks = schedule(shape.layers, shape.bands);
            (n, m, 16)
        }
    };
    let checkpoints = (model.layers / 8).max(1);
    let cost = cost_from_model(&model, batch, checkpoints);
    Ok(Preset { name, model, cost })
}

/// Pipeline-parallel setting for a LLaMA-2 preset: sequence length 4096,
/// microbatch 16, two stages, rank `h/4`, one checkpoint every eight layers,
/// 312 TFLOPS peak and 64 GiB/s links.
pub fn pipeline_preset(name: &str) -> Result<(CostConfig, PipelineConfig)> {
    if llama_shape(name).is_none() {
        return Err(invalid(format!("pipeline presets exist only for llama2-*, not {name:?}")));
    }
    let mut cost = preset(name)?.cost;
    cost.seq_len = 4096;
    cost.rank = cost.hidden / 4;
    cost.rank_schedule = None;
    cost.checkpoints = (cost.layers / 8).max(1);
    let pipe = PipelineConfig {
        peak_flops: 312e12,
        bandwidth_bytes_per_s: 64.0 * crate::cost::GIB,
        microbatch: 16,
        pp_size: 2,
        comm_passes: 3,
    };
    Ok((cost, pipe))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_preset_validates() {
        for n in PRESET_NAMES {
            let p = preset(n).unwrap();
            assert_eq!(p.name, n);
            p.model.validate().unwrap();
            p.cost.validate().unwrap();
            assert_eq!(p.model.ranks.len(), p.model.layers - 1);
        }
        assert!(preset("llama2-3b").is_err());
    }

    #[test]
    fn tiny_shape() {
        let m = preset("tiny").unwrap().model;
        assert_eq!(
            (m.layers, m.hidden, m.ffn_hidden, m.ranks[0], m.seq_len, m.heads),
            (3, 8, 16, 2, 5, 1)
        );
    }

    #[test]
    fn schedule_bands() {
        let m = preset("llama2-350m").unwrap().model;
        assert_eq!(m.ranks.len(), 23);
        assert_eq!(m.rank(16), 224);
        assert_eq!(m.rank(17), 256);
        assert!(schedule(5, &[(3, 7), (5, 9)]) == vec![7, 7, 9, 9]);
    }

    #[test]
    fn pipeline_preset_uses_quarter_rank() {
        let (c, p) = pipeline_preset("llama2-13b").unwrap();
        assert_eq!((c.rank, c.checkpoints, c.seq_len), (1280, 5, 4096));
        assert_eq!(p.microbatch, 16);
        assert!(pipeline_preset("toy").is_err());
    }
}
