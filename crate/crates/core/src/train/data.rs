//! Byte-level corpus loading and deterministic window sampling.

use crate::error::{invalid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const BYTE_VOCAB: usize = 256;

/// Token stream split into a training head and a validation tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// One training example: `inputs[i]` predicts `targets[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Splits off the last tenth for validation. Both parts hold at least one
/// window of `seq_len + 1` tokens.
pub fn split_corpus(bytes: &[u8], seq_len: usize) -> Result<Corpus> {
    let need = seq_len + 1;
    if bytes.len() < 2 * need {
        return Err(invalid(format!(
            "corpus has {} bytes, need at least {}",
            bytes.len(),
            2 * need
        )));
    }
    let val_len = (bytes.len() / 10).max(need);
    let cut = bytes.len() - val_len;
    if cut < need {
        return Err(invalid(format!(
            "corpus of {} bytes leaves no training window of {need}",
            bytes.len()
        )));
    }
    Ok(Corpus {
        train: tokenize(&bytes[..cut]),
        validation: tokenize(&bytes[cut..]),
    })
}

pub fn ingest_corpus(path: &Path, seq_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    split_corpus(&bytes, seq_len)
}

fn window(tokens: &[usize], start: usize, seq_len: usize) -> Window {
    Window {
        inputs: tokens[start..start + seq_len].to_vec(),
        targets: tokens[start + 1..start + seq_len + 1].to_vec(),
    }
}

/// `batch` windows at uniform random offsets, a pure function of
/// `(seed, step)`.
pub fn sample_batch(
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<Window>> {
    if tokens.len() < seq_len + 1 {
        return Err(invalid(format!(
            "{} tokens cannot hold a window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let last = tokens.len() - seq_len - 1;
    Ok((0..batch)
        .map(|_| window(tokens, rng.random_range(0..=last), seq_len))
        .collect())
}

/// Up to `max_windows` consecutive non-overlapping windows from the start.
pub fn validation_windows(tokens: &[usize], seq_len: usize, max_windows: usize) -> Vec<Window> {
    let stride = seq_len + 1;
    (0..tokens.len() / stride)
        .take(max_windows)
        .map(|i| window(tokens, i * stride, seq_len))
        .collect()
}
