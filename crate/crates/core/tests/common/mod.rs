//! Shared fixtures for integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be", "by",
    "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an",
    "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has", "there",
    "been", "if", "more", "when", "will", "would", "who", "so", "no", "river", "model", "layer",
    "light", "stone", "garden", "window", "market", "winter", "signal", "paper", "letter",
    "morning", "water", "mountain", "village", "engine", "number", "table", "story", "question",
    "answer", "reason", "system", "small", "large", "early", "quiet", "bright", "simple", "open",
    "walked", "found", "carried", "opened", "measured", "wrote", "turned", "followed", "built",
];

/// Pseudo-English text with Zipf-distributed words, at least `min_bytes`
/// long. Deterministic in `seed`.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=WORDS.len()).map(|k| 1.0 / k as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut u = rng.random::<f64>() * total;
        for (w, word) in weights.iter().zip(WORDS) {
            if u < *w {
                return *word;
            }
            u -= w;
        }
        WORDS[WORDS.len() - 1]
    };
    let mut out = String::new();
    while out.len() < min_bytes {
        let n = rng.random_range(5..15);
        for i in 0..n {
            let w = pick(&mut rng);
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push(' ');
                out.push_str(w);
            }
        }
        out.push_str(if rng.random_bool(0.2) { ".\n" } else { ". " });
    }
    out.into_bytes()
}
