//! Implementations of the five subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use shakti_core::data::{caption_string, mean_nll, corpus_accuracy, MarkovSource};
use shakti_core::error::CheckpointError;
use shakti_core::model::VlmModel;
use shakti_core::suite::{micro_vlm_report, op_reports, OpReport};
use shakti_core::train::{
    checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile},
    optim::{AdamW, AdamWConfig},
    run_stage, sample_seed, stage_stream,
};
use shakti_core::vision::save_ppm;
use shakti_core::{data::gen_glyph_sample, Error, Result};

use crate::config::ResolvedConfig;

/// Read a checkpoint, folding I/O problems into checkpoint errors so the
/// caller exits with the checkpoint status code.
fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    if !path.exists() {
        return Err(Error::Checkpoint(CheckpointError::Malformed {
            what: "file",
            msg: format!("{} does not exist", path.display()),
        }));
    }
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(CheckpointError::Malformed {
            what: "file",
            msg: format!("{}: {io}", path.display()),
        }),
        other => other,
    })
}

pub fn train(resolved: &ResolvedConfig) -> Result<()> {
    fs::create_dir_all(&resolved.outdir)?;
    let echo = resolved.write_echo()?;
    println!("config echoed to {}", echo.display());

    let cfg = resolved.variant().model_config();
    let vocab = cfg.vocab_size;
    let mut model: VlmModel<f32> = VlmModel::init(cfg, resolved.seed)?;

    let init_path = match (&resolved.init_from, resolved.stage) {
        (Some(p), _) => Some(p.clone()),
        (None, s) if s > 1 => Some(resolved.outdir.join(format!("stage{}.ckpt", s - 1))),
        _ => None,
    };
    if let Some(p) = init_path {
        let ck = read_checkpoint(&p)?;
        ck.apply_to(&mut model)?;
        println!(
            "initialised from {} (stage {}, step {})",
            p.display(),
            ck.stage,
            ck.step
        );
    }

    let sc = &resolved.stage_cfg;
    let mut opt: AdamW<f32> = AdamW::new(AdamWConfig {
        weight_decay: sc.weight_decay,
        ..AdamWConfig::default()
    });
    let stream = stage_stream(resolved.seed, sc, vocab, &resolved.data)?;

    let stage = resolved.stage;
    let outdir = resolved.outdir.clone();
    let seed = resolved.seed;
    let every = resolved.checkpoint_every;
    let log_every = (sc.total_steps / 20).max(1);
    let total = sc.total_steps;
    let started = Instant::now();
    let outcome = run_stage(&mut model, &mut opt, sc, stream, |row, m, o| {
        if row.step % log_every == 0 || row.step == total {
            println!(
                "stage {stage} step {:>6}/{total} lr {:.3e} loss {:.4} tokens {}",
                row.step, row.lr, row.loss, row.tokens_seen
            );
        }
        if row.step % every == 0 && row.step != total {
            let p = outdir.join(format!("stage{stage}.step{}.ckpt", row.step));
            save_checkpoint(&p, m, Some(o), stage as u32, row.step as u64, seed)?;
        }
        Ok(())
    })?;

    let final_path = outdir.join(format!("stage{stage}.ckpt"));
    save_checkpoint(
        &final_path,
        &model,
        Some(&opt),
        stage as u32,
        outcome.rows.len() as u64,
        seed,
    )?;
    let metrics_path = outdir.join(format!("stage{stage}.metrics.csv"));
    shakti_core::train::write_metrics_csv(&metrics_path, &outcome.rows)?;

    let last = outcome.rows.last().expect("run_stage rejects empty runs");
    println!(
        "stage {stage} finished: {} steps in {:.1}s, final loss {:.4}{}",
        outcome.rows.len(),
        started.elapsed().as_secs_f64(),
        last.loss,
        if outcome.dropped_micro > 0 {
            format!(" ({} trailing micro-batches dropped)", outcome.dropped_micro)
        } else {
            String::new()
        }
    );
    println!("checkpoint: {}", final_path.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    model: String,
    stage: u8,
    seed: u64,
    metric: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_nll: Option<f64>,
    count: usize,
}

pub fn eval(resolved: &ResolvedConfig, checkpoint: &Path, stage_flag: Option<u8>) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let stage = stage_flag.unwrap_or(ck.stage as u8);
    if !(1..=3).contains(&stage) {
        return Err(Error::Config(format!(
            "stage: must be 1, 2 or 3 (checkpoint says {})",
            ck.stage
        )));
    }

    let cfg = resolved.variant().model_config();
    let vocab = cfg.vocab_size;
    let mut model: VlmModel<f32> = VlmModel::init(cfg, resolved.seed)?;
    ck.apply_to(&mut model)?;

    let report = if stage == 1 {
        // Held-out split of the same Markov source the run trained on.
        let n_tokens = resolved.data.eval_samples * 32;
        let src = MarkovSource::new(resolved.seed, vocab)?;
        let tokens = src.tokens(resolved.seed, "eval", n_tokens);
        let nll = mean_nll(&model, &tokens)?;
        EvalReport {
            checkpoint: checkpoint.to_path_buf(),
            model: resolved.model.clone(),
            stage,
            seed: resolved.seed,
            metric: "perplexity",
            value: nll.exp(),
            mean_nll: Some(nll),
            count: tokens.len(),
        }
    } else {
        let samples = shakti_core::train::ocr_eval_set(
            resolved.seed,
            &resolved.data.glyph_params(),
            resolved.data.eval_samples,
        )?;
        let em = corpus_accuracy(&model, &samples)?;
        EvalReport {
            checkpoint: checkpoint.to_path_buf(),
            model: resolved.model.clone(),
            stage,
            seed: resolved.seed,
            metric: "exact_match",
            value: em,
            mean_nll: None,
            count: samples.len(),
        }
    };

    fs::create_dir_all(&resolved.outdir)?;
    let out = resolved.outdir.join(format!("eval.stage{stage}.json"));
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&out, json)?;
    println!(
        "stage {stage} {}: {:.6} over {} {}",
        report.metric,
        report.value,
        report.count,
        if stage == 1 { "tokens" } else { "samples" }
    );
    println!("report: {}", out.display());
    Ok(())
}

const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

/// Run the gradient batteries; returns true when everything is inside
/// tolerance.
pub fn gradcheck() -> Result<bool> {
    let eps = 1e-3;
    let seeds = [0u64, 1, 2];
    println!("finite-difference gradient check (eps {eps:.0e}, seeds {seeds:?})");
    let mut all_ok = true;
    let mut show = |r: &OpReport, tol: f64| {
        let ok = r.worst_rel < tol;
        all_ok &= ok;
        println!(
            "  {:<22} worst rel {:>9.3e} over {:>5} checks (tol {tol:.0e})  {}",
            r.name,
            r.worst_rel,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
    };
    for r in op_reports(&seeds, eps)? {
        show(&r, OP_TOL);
    }
    let micro = micro_vlm_report(eps, 4, 0)?;
    show(&micro, E2E_TOL);
    println!("{}", if all_ok { "all gradients verified" } else { "gradient check FAILED" });
    Ok(all_ok)
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let bytes_len = fs::metadata(checkpoint).map(|m| m.len()).unwrap_or(0);
    let ck = read_checkpoint(checkpoint)?;
    println!("checkpoint: {} ({} bytes)", checkpoint.display(), bytes_len);
    println!("  version:       {}", ck.version);
    println!("  config digest: {:#018x}", ck.config_digest);
    println!("  stage:         {}", ck.stage);
    println!("  step:          {}", ck.step);
    println!("  seed:          {}", ck.seed);
    match &ck.optimizer {
        Some((t, _)) => println!("  optimizer:     present (t = {t})"),
        None => println!("  optimizer:     absent"),
    }
    let mut by_component: Vec<(&str, u64)> =
        vec![("encoder", 0), ("projector", 0), ("decoder", 0)];
    let mut total = 0u64;
    for t in &ck.tensors {
        let n = t.data.len() as u64;
        total += n;
        for (prefix, count) in by_component.iter_mut() {
            if t.name.starts_with(*prefix) {
                *count += n;
            }
        }
    }
    println!("  tensors:       {} ({} parameters)", ck.tensors.len(), total);
    for (prefix, count) in &by_component {
        println!("    {prefix:<10} {count}");
    }
    for t in &ck.tensors {
        println!("    {:<28} {:?}", t.name, t.shape);
    }
    Ok(())
}

pub fn gen_data(resolved: &ResolvedConfig, count: usize) -> Result<()> {
    fs::create_dir_all(&resolved.outdir)?;
    resolved.write_echo()?;
    let glyph = resolved.data.glyph_params();
    let mut manifest = String::new();
    for i in 0..count {
        let s = gen_glyph_sample(sample_seed(resolved.seed, "dump", i), &glyph)?;
        let name = format!("sample{i:04}.ppm");
        save_ppm(&s.image, &resolved.outdir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", caption_string(&s.caption_ids)));
    }
    let manifest_path = resolved.outdir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    println!(
        "wrote {count} samples ({}px, {} glyphs each) and manifest.tsv to {}",
        glyph.image_size,
        glyph.n_glyphs,
        resolved.outdir.display()
    );
    Ok(())
}
