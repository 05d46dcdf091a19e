//! Byte-level language-model training: learning-rate schedule, batched
//! gradient evaluation, clipping, Adam, validation and checkpoints.
//!
//! Sequences of a batch are evaluated in parallel and their gradients are
//! summed in batch order, so results do not depend on the thread count.

mod adam;
mod checkpoint;
mod data;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    checkpoint_path, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_FILE, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{
    ingest_corpus, sample_batch, split_corpus, tokenize, validation_windows, Corpus, Window, BYTE_VOCAB,
};

use crate::backprop::{sequence_loss, sequence_loss_and_grad, Gradients};
use crate::error::{invalid, Error, Result};
use crate::model::{Arch, Params};
use crate::recompute::{select_checkpoints, CheckpointPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

fn default_warmup() -> f64 {
    0.10
}
fn default_final_fraction() -> f64 {
    0.10
}
fn default_lowrank_scale() -> f64 {
    0.25
}
fn default_clip() -> f64 {
    1.0
}
fn default_peak_lr() -> f64 {
    3e-3
}
fn default_eval_windows() -> usize {
    16
}
fn default_checkpoints() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
    #[serde(default = "default_lowrank_scale")]
    pub lowrank_lr_scale: f64,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Selective activation storage with recomputation in the backward pass.
    #[serde(default)]
    pub recompute: bool,
    /// Number of stored layers when `recompute` is set.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
}

impl TrainConfig {
    pub fn new(total_steps: u64, batch_size: usize) -> Self {
        Self {
            total_steps,
            warmup_fraction: default_warmup(),
            peak_lr: default_peak_lr(),
            final_lr_fraction: default_final_fraction(),
            lowrank_lr_scale: default_lowrank_scale(),
            batch_size,
            grad_clip_norm: default_clip(),
            eval_every: 0,
            eval_windows: default_eval_windows(),
            corpus_path: None,
            checkpoint_dir: None,
            seed: 0,
            recompute: false,
            checkpoints: default_checkpoints(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(invalid("total_steps and batch_size must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(invalid("warmup_fraction must lie in (0, 1)"));
        }
        if !(self.peak_lr > 0.0) || !(self.final_lr_fraction >= 0.0) || !(self.lowrank_lr_scale >= 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid("grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `final_lr_fraction · peak_lr` at `total_steps`.
pub fn lr_at(step: u64, tc: &TrainConfig) -> f64 {
    let total = tc.total_steps as f64;
    let warmup = tc.warmup_fraction * total;
    let s = (step as f64).min(total);
    if s < warmup {
        return tc.peak_lr * s / warmup;
    }
    let floor = tc.final_lr_fraction * tc.peak_lr;
    let progress = if total > warmup { (s - warmup) / (total - warmup) } else { 1.0 };
    floor + (tc.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub lr_low_rank: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Mean loss and mean gradient over a batch, summed in batch order.
pub fn batch_loss_and_grad(
    params: &Params,
    windows: &[Window],
    plan: Option<&CheckpointPlan>,
) -> Result<(f64, Gradients)> {
    if windows.is_empty() {
        return Err(invalid("empty batch"));
    }
    let per: Vec<(f64, Gradients)> = windows
        .par_iter()
        .map(|w| sequence_loss_and_grad(params, &w.inputs, &w.targets, plan))
        .collect::<Result<_>>()?;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        grads.axpy_assign(1.0, &g)?;
    }
    let n = windows.len() as f64;
    grads.scale_assign(1.0 / n);
    Ok((loss / n, grads))
}

/// Mean loss over windows. Takes the parameters by shared reference only.
pub fn evaluate(params: &Params, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no validation windows"));
    }
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|w| sequence_loss(params, &w.inputs, &w.targets))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Rescales `grads` to norm at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_assign(max_norm / norm);
    }
    norm
}

pub struct Trainer {
    pub params: Params,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    tc: TrainConfig,
    corpus: Corpus,
    plan: Option<CheckpointPlan>,
}

impl Trainer {
    pub fn new(params: Params, tc: TrainConfig, corpus: Corpus) -> Result<Self> {
        let adam = AdamState::new(&params.tensors);
        Self::from_parts(params, adam, 0, tc, corpus)
    }

    pub fn resume(ckpt: Checkpoint, tc: TrainConfig, corpus: Corpus) -> Result<Self> {
        Self::from_parts(ckpt.params, ckpt.adam, ckpt.step, tc, corpus)
    }

    fn from_parts(params: Params, adam: AdamState, step: u64, tc: TrainConfig, corpus: Corpus) -> Result<Self> {
        tc.validate()?;
        params.config.validate()?;
        let cfg = &params.config;
        if cfg.vocab < BYTE_VOCAB {
            return Err(invalid(format!(
                "byte-level training needs vocab >= {BYTE_VOCAB}, config has {}",
                cfg.vocab
            )));
        }
        let plan = if tc.recompute {
            if cfg.arch != Arch::CrNet {
                return Err(invalid("recomputation needs the crnet architecture"));
            }
            Some(select_checkpoints(cfg.layers, tc.checkpoints)?)
        } else {
            None
        };
        if validation_windows(&corpus.validation, cfg.seq_len, 1).is_empty() {
            return Err(invalid("validation split is shorter than one window"));
        }
        Ok(Self {
            params,
            adam,
            step,
            tc,
            corpus,
            plan,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.tc
    }

    pub fn plan(&self) -> Option<&CheckpointPlan> {
        self.plan.as_ref()
    }

    pub fn validation_loss(&self) -> Result<f64> {
        let w = validation_windows(&self.corpus.validation, self.params.config.seq_len, self.tc.eval_windows);
        evaluate(&self.params, &w)
    }

    /// Samples the batch for the current step and applies one update. A
    /// non-finite loss or gradient aborts before any parameter changes.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let tc = &self.tc;
        let windows = sample_batch(
            &self.corpus.train,
            tc.batch_size,
            self.params.config.seq_len,
            tc.seed,
            self.step,
        )?;
        let (loss, mut grads) = batch_loss_and_grad(&self.params, &windows, self.plan.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let grad_norm = clip_global_norm(&mut grads, tc.grad_clip_norm);
        let lr = lr_at(self.step + 1, tc);
        adam_step(&mut self.params.tensors, &grads, &mut self.adam, lr, tc.lowrank_lr_scale)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss,
            lr,
            lr_low_rank: lr * tc.lowrank_lr_scale,
            grad_norm,
            val_loss: None,
        })
    }

    /// Trains until `total_steps`, writing one JSON line per step.
    /// Checkpoints are saved at every evaluation when a directory is set.
    pub fn run<W: Write>(&mut self, log: &mut W) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        while self.step < self.tc.total_steps {
            let mut rec = self.train_step()?;
            let every = self.tc.eval_every;
            let last = self.step == self.tc.total_steps;
            if last || (every > 0 && self.step.is_multiple_of(every)) {
                rec.val_loss = Some(self.validation_loss()?);
                if let Some(dir) = &self.tc.checkpoint_dir {
                    save_checkpoint(dir, &self.params, &self.adam, self.step)?;
                }
            }
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
            out.push(rec);
        }
        log.flush()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
        split_corpus(text.as_bytes(), 8).unwrap()
    }

    fn small() -> (Params, TrainConfig) {
        let cfg = ModelConfig::uniform(3, 16, 24, 2, 4, 256, 8, Arch::CrNet);
        let mut tc = TrainConfig::new(12, 3);
        tc.peak_lr = 1e-2;
        (Params::init(&cfg, 1).unwrap(), tc)
    }

    #[test]
    fn schedule_endpoints() {
        let tc = TrainConfig::new(1000, 1);
        assert_eq!(lr_at(0, &tc), 0.0);
        assert!((lr_at(100, &tc) - tc.peak_lr).abs() < 1e-15);
        assert!((lr_at(1000, &tc) - 0.1 * tc.peak_lr).abs() < 1e-12 * tc.peak_lr);
        assert!((lr_at(50, &tc) - 0.5 * tc.peak_lr).abs() < 1e-15);
    }

    #[test]
    fn schedule_continuous_at_junction() {
        let tc = TrainConfig::new(1000, 1);
        let w = 100.0;
        let left = tc.peak_lr * (w - 1e-13) / w;
        let right = {
            let f = 0.1 * tc.peak_lr;
            let p = 1e-13 / 900.0;
            f + (tc.peak_lr - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        };
        assert!((left - right).abs() <= 1e-12 * tc.peak_lr);
        assert!((lr_at(100, &tc) - right).abs() <= 1e-12 * tc.peak_lr);
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let tc = TrainConfig::new(200, 1);
        let lrs: Vec<f64> = (20..=200).map(|s| lr_at(s, &tc)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0] + 1e-18));
    }

    #[test]
    fn clipping_bounds_norm() {
        let (p, _) = small();
        let mut g = p.tensors.clone();
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!(g.global_norm() <= 1.0 + 1e-9);
        let mut tiny = p.tensors.zeros_like();
        tiny.lm_head.data_mut()[0] = 0.5;
        assert_eq!(clip_global_norm(&mut tiny, 1.0), 0.5);
        assert_eq!(tiny.lm_head.data()[0], 0.5);
    }

    #[test]
    fn validation_does_not_mutate() {
        let (p, tc) = small();
        let t = Trainer::new(p.clone(), tc, corpus()).unwrap();
        t.validation_loss().unwrap();
        assert_eq!(t.params, p);
    }

    #[test]
    fn runs_are_identical_and_write_jsonl() {
        let (p, tc) = small();
        let mut a = Vec::new();
        let mut b = Vec::new();
        Trainer::new(p.clone(), tc.clone(), corpus()).unwrap().run(&mut a).unwrap();
        Trainer::new(p, tc, corpus()).unwrap().run(&mut b).unwrap();
        assert_eq!(a, b);
        let lines: Vec<StepLog> = String::from_utf8(a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 12);
        assert!(lines[11].val_loss.is_some());
        assert!((lines[3].lr_low_rank - 0.25 * lines[3].lr).abs() < 1e-18);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (p, tc) = small();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut t = Trainer::new(p.clone(), tc.clone(), corpus()).unwrap();
                t.run(&mut Vec::new()).unwrap();
                t.params
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (p, mut tc) = small();
        tc.total_steps = 10;
        let mut full = Trainer::new(p.clone(), tc.clone(), corpus()).unwrap();
        let full_log = full.run(&mut Vec::new()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(p, tc.clone(), corpus()).unwrap();
        for _ in 0..4 {
            first.train_step().unwrap();
        }
        save_checkpoint(dir.path(), &first.params, &first.adam, first.step).unwrap();
        let mut second = Trainer::resume(load_checkpoint(dir.path()).unwrap(), tc, corpus()).unwrap();
        let tail = second.run(&mut Vec::new()).unwrap();
        assert_eq!(second.params, full.params);
        assert_eq!(tail, full_log[4..].to_vec());
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_checkpoint() {
        let (p, mut tc) = small();
        let dir = tempfile::tempdir().unwrap();
        tc.checkpoint_dir = Some(dir.path().to_path_buf());
        tc.eval_every = 2;
        let mut t = Trainer::new(p, tc, corpus()).unwrap();
        t.train_step().unwrap();
        t.train_step().unwrap();
        save_checkpoint(dir.path(), &t.params, &t.adam, t.step).unwrap();
        t.params.tensors.lm_head.data_mut()[0] = f64::NAN;
        let poisoned = t.params.clone();
        assert!(matches!(t.train_step(), Err(Error::NonFinite(_))));
        assert_eq!(t.step, 2);
        assert_eq!(format!("{:?}", t.params), format!("{poisoned:?}"));
        assert_eq!(load_checkpoint(dir.path()).unwrap().step, 2);
    }

    #[test]
    fn recompute_requires_crnet() {
        let cfg = ModelConfig::uniform(2, 16, 24, 2, 4, 256, 8, Arch::FullRank);
        let mut tc = TrainConfig::new(2, 1);
        tc.recompute = true;
        assert!(Trainer::new(Params::init(&cfg, 0).unwrap(), tc, corpus()).is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let tc: TrainConfig = serde_json::from_str(r#"{"total_steps":5,"batch_size":2}"#).unwrap();
        assert_eq!(tc, TrainConfig::new(5, 2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"total_steps":5,"batch_size":2,"x":1}"#).is_err());
    }
}
