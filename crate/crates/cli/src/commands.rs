//! Subcommand implementations.

use crate::config::{resolve, ConfigFile, Overrides};
use crate::{
    AnalyzeArgs, Command, Common, CostArgs, DumpArgs, GradCheckArgs, Outcome, PipelineArgs,
    RecomputeCheckArgs, TheoremArgs, TrainArgs,
};
use anyhow::{bail, Context, Result};
use crnet_core::analysis::{
    analyze_activations, dump_activations, theorem_check, write_stats_csv, RankChoice, TheoremReport,
    DEFAULT_BETA0_GRID,
};
use crnet_core::backprop::{grad_check, sequence_loss_and_grad};
use crnet_core::cost::{cost_report, pipeline_report, GcpMode, Method, PipelineConfig, GIB};
use crnet_core::model::{Arch, ModelConfig, Params};
use crnet_core::presets::{pipeline_preset, preset};
use crnet_core::recompute::{
    reconstruction_error_profile, select_checkpoints, write_profile_csv, CheckpointPlan,
};
use crnet_core::train::{ingest_corpus, load_checkpoint, validation_windows, TrainConfig, Trainer};
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Train(a) => train(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::RecomputeCheck(a) => recompute_check(a),
        Command::Analyze(a) => analyze(a),
        Command::TheoremCheck(a) => theorem(a),
        Command::Cost(a) => cost(a),
        Command::PipelineCost(a) => pipeline(a),
        Command::DumpActivations(a) => dump(a),
    }
}

/// Applies `--threads`, creates `--out` and loads `--config`.
fn setup(common: &Common) -> Result<ConfigFile> {
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    ConfigFile::load(common.config.as_deref())
}

/// Prints and stores the fully resolved configuration.
fn echo_config(out: &Path, resolved: &Value) -> Result<()> {
    let text = serde_json::to_string(resolved)?;
    println!("config {text}");
    std::fs::write(out.join("resolved_config.json"), serde_json::to_string_pretty(resolved)? + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn preset_model(common: &Common, default: &str) -> Result<ModelConfig> {
    Ok(preset(common.preset.as_deref().unwrap_or(default))?.model)
}

fn model_overrides(common: &Common) -> Overrides {
    let mut o = Overrides::default();
    o.set("seed", common.seed);
    o
}

fn parse_arch(s: &str) -> Result<Arch> {
    serde_json::from_value(Value::String(s.to_string()))
        .with_context(|| format!("unknown arch {s:?}; expected crnet or full_rank"))
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let base = preset_model(&a.common, "toy")?;
    let mut mo = model_overrides(&a.common);
    if let Some(arch) = &a.arch {
        mo.set("arch", Some(serde_json::to_value(parse_arch(arch)?)?));
    }
    let model: ModelConfig = resolve(&base, file.section("model"), &mo, "model")?;

    let mut tc_base = TrainConfig::new(300, 8);
    tc_base.checkpoint_dir = Some(a.common.out.clone());
    let mut to = Overrides::default();
    to.set("total_steps", a.steps)
        .set("batch_size", a.batch)
        .set("peak_lr", a.lr)
        .set("checkpoints", a.checkpoints)
        .set("eval_every", a.eval_every)
        .set("seed", a.common.seed)
        .set("corpus_path", a.corpus.as_ref().map(|p| p.display().to_string()));
    if a.recompute {
        to.set("recompute", Some(true));
    }
    let tc: TrainConfig = resolve(&tc_base, file.section("train"), &to, "train")?;
    echo_config(&a.common.out, &json!({"model": model, "train": tc}))?;

    let corpus_path = tc
        .corpus_path
        .clone()
        .context("a corpus is required: pass --corpus or set train.corpus_path")?;
    let corpus = ingest_corpus(&corpus_path, model.seq_len)?;
    let params = Params::init(&model, model.seed)?;
    let mut trainer = Trainer::new(params, tc, corpus)?;
    let log_path = a.common.out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let records = trainer.run(&mut log).with_context(|| {
        format!(
            "training aborted; metrics so far are in {} and the last saved checkpoint is kept",
            log_path.display()
        )
    })?;
    log.flush()?;
    let first = records.first().map_or(f64::NAN, |r| r.loss);
    let last = records.last().context("no steps were run")?;
    println!(
        "train: {} steps, loss {first:.4} -> {:.4}, val_loss {:.4}, log {}",
        last.step,
        last.loss,
        last.val_loss.unwrap_or(f64::NAN),
        log_path.display()
    );
    Ok(Outcome::Ok)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let base = preset_model(&a.common, "tiny")?;
    let model: ModelConfig = resolve(&base, file.section("model"), &model_overrides(&a.common), "model")?;
    echo_config(
        &a.common.out,
        &json!({"model": model, "fd_step": a.fd_step, "tol": a.tol}),
    )?;
    let report = grad_check(&model, model.seed, a.fd_step)?;
    let pass = report.passes(a.tol);
    write_json(
        &a.common.out.join("grad_check.json"),
        &json!({"report": report, "tol": a.tol, "pass": pass}),
    )?;
    println!(
        "grad-check: max rel err {:.3e} over {} groups, tol {:.0e}: {}",
        report.max_rel_err(),
        report.groups.len(),
        a.tol,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Ok } else { Outcome::CheckFailed })
}

fn recompute_check(a: RecomputeCheckArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let mut base = preset_model(&a.common, "toy")?;
    let layers = a.layers.unwrap_or(if a.common.preset.is_none() { 9 } else { base.layers });
    if layers != base.layers {
        let r = base.ranks.first().copied().unwrap_or(1);
        base.layers = layers;
        base.ranks = vec![r; layers.saturating_sub(1)];
    }
    base.arch = Arch::CrNet;
    let model: ModelConfig = resolve(&base, file.section("model"), &model_overrides(&a.common), "model")?;
    let plan = match (&a.stored, a.checkpoints) {
        (Some(s), _) => CheckpointPlan::new(s.iter().copied(), model.layers)?,
        (None, Some(k)) => select_checkpoints(model.layers, k)?,
        (None, None) if model.layers == 9 => CheckpointPlan::new([5, 9], 9)?,
        (None, None) => select_checkpoints(model.layers, (model.layers / 4).max(1))?,
    };
    echo_config(
        &a.common.out,
        &json!({
            "model": model, "stored_layers": plan.layers(), "beta_min": a.beta_min,
            "beta_max": a.beta_max, "tol_grad": a.tol_grad, "tol_recon": a.tol_recon
        }),
    )?;
    let mut params = Params::init(&model, model.seed)?;
    params.randomize_low_rank(model.seed.wrapping_add(1), a.beta_min, a.beta_max);
    let tokens: Vec<usize> = (0..=model.seq_len)
        .map(|i| (i * 131 + model.seed as usize * 17 + 3) % model.vocab)
        .collect();
    let (inp, tgt) = (&tokens[..model.seq_len], &tokens[1..]);
    let (loss_full, full) = sequence_loss_and_grad(&params, inp, tgt, None)?;
    let (loss_sel, sel) = sequence_loss_and_grad(&params, inp, tgt, Some(&plan))?;
    let mut worst_grad = 0.0f64;
    for ((_, x), (_, y)) in full.slices().iter().zip(sel.slices()) {
        for (p, q) in x.iter().zip(y) {
            let m = p.abs().max(q.abs());
            if m > 0.0 {
                worst_grad = worst_grad.max((p - q).abs() / m);
            }
        }
    }
    let profile = reconstruction_error_profile(&params, inp, &plan)?;
    let worst_recon = profile.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mut csv = BufWriter::new(File::create(a.common.out.join("reconstruction.csv"))?);
    write_profile_csv(&mut csv, &profile)?;
    csv.flush()?;
    let pass = worst_grad <= a.tol_grad && worst_recon <= a.tol_recon;
    write_json(
        &a.common.out.join("recompute_check.json"),
        &json!({
            "loss_full": loss_full, "loss_recompute": loss_sel,
            "max_grad_rel_err": worst_grad, "max_reconstruction_rel_err": worst_recon, "pass": pass
        }),
    )?;
    println!(
        "recompute-check: stored {:?}, gradient rel err {worst_grad:.3e}, reconstruction rel err {worst_recon:.3e}: {}",
        plan.layers(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Ok } else { Outcome::CheckFailed })
}

/// Loads a checkpointed model, or initialises the preset from its seed.
fn load_model(common: &Common, file: &ConfigFile, checkpoint: Option<&Path>, arch: Option<Arch>) -> Result<Params> {
    if let Some(dir) = checkpoint {
        return Ok(load_checkpoint(dir)
            .with_context(|| format!("loading checkpoint from {}", dir.display()))?
            .params);
    }
    let mut base = preset_model(common, "toy")?;
    if let Some(arch) = arch {
        base.arch = arch;
    }
    let model: ModelConfig = resolve(&base, file.section("model"), &model_overrides(common), "model")?;
    Ok(Params::init(&model, model.seed)?)
}

fn corpus_windows(path: Option<&PathBuf>, model: &ModelConfig, windows: usize) -> Result<Vec<Vec<usize>>> {
    let path = path.context("a corpus is required: pass --corpus")?;
    let corpus = ingest_corpus(path, model.seq_len)?;
    let seqs: Vec<Vec<usize>> = validation_windows(&corpus.validation, model.seq_len, windows)
        .into_iter()
        .map(|w| w.inputs)
        .collect();
    if seqs.is_empty() {
        bail!("corpus validation split holds no window of {} tokens", model.seq_len + 1);
    }
    Ok(seqs)
}

fn analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let params = load_model(&a.common, &file, a.checkpoint.as_deref(), Some(Arch::FullRank))?;
    echo_config(
        &a.common.out,
        &json!({
            "model": params.config, "checkpoint": a.checkpoint, "corpus": a.corpus,
            "windows": a.windows, "rank_fraction": a.rank_fraction, "beta0_grid": DEFAULT_BETA0_GRID
        }),
    )?;
    let seqs = corpus_windows(a.corpus.as_ref(), &params.config, a.windows)?;
    let analysis = analyze_activations(&params, &seqs, a.rank_fraction, &DEFAULT_BETA0_GRID)?;
    let mut csv = BufWriter::new(File::create(a.common.out.join("residual_stats.csv"))?);
    write_stats_csv(&mut csv, &analysis.rows)?;
    csv.flush()?;
    write_json(&a.common.out.join("analysis.json"), &analysis)?;
    println!(
        "analyze: {} pairs, mean rel err cross {:.4} vs direct {:.4}, global beta0 {}",
        analysis.rows.len(),
        analysis.mean_rel_err_cross,
        analysis.mean_rel_err_direct,
        analysis.global_beta0
    );
    Ok(Outcome::Ok)
}

fn theorem(a: TheoremArgs) -> Result<Outcome> {
    let _ = setup(&a.common)?;
    let first = a.common.seed.unwrap_or(0);
    echo_config(
        &a.common.out,
        &json!({"n": a.n, "eps": a.eps, "trials": a.trials, "first_seed": first, "rank": "floor(r0/2)"}),
    )?;
    let mut summary = Vec::new();
    let mut trials: Vec<TheoremReport> = Vec::new();
    let mut pass = true;
    for &eps in &a.eps {
        let reports: Vec<TheoremReport> = (first..first + a.trials)
            .map(|s| theorem_check(a.n, eps, RankChoice::HalfThreshold, s))
            .collect::<crnet_core::Result<_>>()?;
        let holds = reports.iter().filter(|r| r.holds).count();
        let in_hyp = reports.iter().filter(|r| r.in_hypothesis).count();
        pass &= holds == reports.len() && in_hyp == reports.len();
        summary.push(json!({"epsilon_cos": eps, "holds": holds, "in_hypothesis": in_hyp, "trials": a.trials}));
        println!("theorem-check: eps {eps}: {holds}/{} hold, {in_hyp} in hypothesis", a.trials);
        trials.extend(reports);
    }
    write_json(
        &a.common.out.join("theorem.json"),
        &json!({"summary": summary, "pass": pass, "trials": trials}),
    )?;
    Ok(if pass { Outcome::Ok } else { Outcome::CheckFailed })
}

fn cost(a: CostArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let mut base = preset(a.common.preset.as_deref().unwrap_or("llama2-7b"))?.cost;
    if let Some(m) = &a.method {
        base.method = m.parse::<Method>()?;
        base.gcp_mode = GcpMode::default_for(base.method);
    }
    let mut o = Overrides::default();
    o.set("gcp_mode", a.gcp_mode.as_ref().map(|g| g.parse::<GcpMode>().map(|g| g.name().to_string())).transpose()?)
        .set("batch", a.batch)
        .set("seq_len", a.seq)
        .set("checkpoints", a.checkpoints);
    if let Some(r) = a.rank {
        o.set("rank", Some(r)).set("rank_schedule", Some(Value::Null));
    }
    let cfg = resolve(&base, file.section("cost"), &o, "cost")?;
    echo_config(&a.common.out, &json!({"cost": cfg}))?;
    let report = cost_report(&cfg)?;
    write_json(&a.common.out.join("cost.json"), &report)?;
    let text = report.to_text();
    std::fs::write(a.common.out.join("cost.txt"), &text)?;
    print!("{text}");
    println!(
        "cost: {} step_flops {:.3e} per sequence, params {:.4e}, optimizer memory {:.3} GiB",
        cfg.method.name(),
        report.step_flops.total as f64,
        report.param_count.total as f64,
        report.optimizer_memory_gib
    );
    Ok(Outcome::Ok)
}

fn pipeline(a: PipelineArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let (base_cost, base_pipe) = pipeline_preset(a.common.preset.as_deref().unwrap_or("llama2-13b"))?;
    let mut co = Overrides::default();
    co.set("seq_len", a.seq).set("checkpoints", a.checkpoints).set("rank", a.rank);
    let cost = resolve(&base_cost, file.section("cost"), &co, "cost")?;
    let mut po = Overrides::default();
    po.set("peak_flops", a.peak_tflops.map(|t| t * 1e12))
        .set("bandwidth_bytes_per_s", a.bandwidth_gbs.map(|g| g * GIB))
        .set("microbatch", a.microbatch)
        .set("pp_size", a.pp_size);
    let pipe: PipelineConfig = resolve(&base_pipe, file.section("pipeline"), &po, "pipeline")?;
    let methods = match &a.method {
        Some(m) => vec![m.parse::<Method>()?],
        None => vec![Method::FullRank, Method::Crnet],
    };
    echo_config(
        &a.common.out,
        &json!({"cost": cost, "pipeline": pipe, "methods": methods}),
    )?;
    let mut reports = Vec::new();
    for method in methods {
        let cfg = crnet_core::cost::CostConfig {
            method,
            gcp_mode: GcpMode::default_for(method),
            ..cost.clone()
        };
        let r = pipeline_report(&pipe, &cfg)?;
        print!("{}", r.to_text());
        println!(
            "pipeline-cost: {} compute {:.3e} FLOPs / {:.2} s, comm {:.3} GiB / {:.4} s",
            method.name(),
            r.compute_flops,
            r.compute_time_s,
            r.comm_volume_gib,
            r.comm_time_s
        );
        reports.push(r);
    }
    write_json(&a.common.out.join("pipeline.json"), &reports)?;
    Ok(Outcome::Ok)
}

fn dump(a: DumpArgs) -> Result<Outcome> {
    let file = setup(&a.common)?;
    let params = load_model(&a.common, &file, a.checkpoint.as_deref(), None)?;
    echo_config(
        &a.common.out,
        &json!({"model": params.config, "checkpoint": a.checkpoint, "corpus": a.corpus, "windows": a.windows}),
    )?;
    let seqs = corpus_windows(a.corpus.as_ref(), &params.config, a.windows)?;
    let dir = a.common.out.join("activations");
    let paths = dump_activations(&params, &seqs, &dir)?;
    println!("dump-activations: wrote {} matrices to {}", paths.len(), dir.display());
    Ok(Outcome::Ok)
}
