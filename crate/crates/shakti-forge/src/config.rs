//! Run configuration: JSON file, command-line overrides, and the fully
//! resolved form echoed to `config.resolved.json`.
//!
//! Resolution order, weakest first: stage defaults for the chosen model,
//! then the config file, then command-line flags. The resolved echo is
//! itself a valid config file that reproduces the run with no extra flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shakti_core::train::{stage_defaults, DataParams, ModelVariant, Objective, StageConfig};
use shakti_core::{Error, Result};

/// On-disk run configuration. Every field is optional; unknown keys are
/// rejected with their full path.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub stage: Option<u8>,
    pub seed: Option<u64>,
    pub outdir: Option<PathBuf>,
    pub table2_lr: Option<bool>,
    pub checkpoint_every: Option<usize>,
    pub init_from: Option<PathBuf>,
    pub stage_cfg: Option<StagePatch>,
    pub data: Option<DataPatch>,
}

/// Partial stage-hyperparameter overrides.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePatch {
    /// Cross-check only: when present it must equal the run's stage.
    pub stage: Option<u8>,
    pub peak_lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub total_steps: Option<usize>,
    pub freeze: Option<BTreeSet<String>>,
    pub grad_accum: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub weight_decay: Option<f64>,
    pub objective: Option<Objective>,
    pub dpo_beta: Option<f64>,
}

/// Partial data overrides.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPatch {
    pub micro_batch: Option<usize>,
    pub glyph_image_size: Option<usize>,
    pub glyph_count: Option<usize>,
    pub eval_samples: Option<usize>,
}

/// Command-line overrides (strongest layer).
#[derive(Debug, Default, Clone)]
pub struct CliOverrides {
    pub model: Option<String>,
    pub stage: Option<u8>,
    pub seed: Option<u64>,
    pub outdir: Option<PathBuf>,
    /// True only when the flag was passed.
    pub table2_lr: bool,
}

/// Fallbacks for commands that can run without explicit model/stage
/// (data generation); training and evaluation pass `None`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Fallback {
    pub model: Option<&'static str>,
    pub stage: Option<u8>,
}

/// A fully determined run. Serialized as `config.resolved.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub model: String,
    pub stage: u8,
    pub seed: u64,
    pub outdir: PathBuf,
    pub table2_lr: bool,
    pub checkpoint_every: usize,
    pub init_from: Option<PathBuf>,
    pub stage_cfg: StageConfig,
    pub data: DataParams,
}

impl ResolvedConfig {
    pub fn variant(&self) -> ModelVariant {
        self.model.parse().expect("resolved model is always valid")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Write the `config.resolved.json` echo into the run directory.
    pub fn write_echo(&self) -> Result<PathBuf> {
        let path = self.outdir.join("config.resolved.json");
        std::fs::write(&path, self.to_json())?;
        Ok(path)
    }
}

/// Parse a config file, reporting the JSON path of the offending key on
/// failure (for example `stage_cfg.grad_accum`).
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        if path == "." {
            Error::Config(msg)
        } else {
            Error::Config(format!("{path}: {msg}"))
        }
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Combine defaults, config file and flags into a [`ResolvedConfig`].
pub fn resolve(file: RunConfig, cli: CliOverrides, fallback: Fallback) -> Result<ResolvedConfig> {
    let model = cli
        .model
        .or(file.model)
        .or_else(|| fallback.model.map(str::to_string))
        .ok_or_else(|| bad("model: required (pass --model or set \"model\" in the config)"))?;
    let variant: ModelVariant = model.parse().map_err(|e: String| bad(format!("model: {e}")))?;
    let stage = cli
        .stage
        .or(file.stage)
        .or(fallback.stage)
        .ok_or_else(|| bad("stage: required (pass --stage or set \"stage\" in the config)"))?;
    let table2_lr = cli.table2_lr || file.table2_lr.unwrap_or(false);
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let outdir = cli
        .outdir
        .or(file.outdir)
        .unwrap_or_else(|| PathBuf::from("runs").join(&model));

    let mut stage_cfg = stage_defaults(variant, stage, table2_lr)?;
    if let Some(p) = file.stage_cfg {
        if let Some(ps) = p.stage {
            if ps != stage {
                return Err(bad(format!(
                    "stage_cfg.stage: {ps} conflicts with the run's stage {stage}"
                )));
            }
        }
        if let Some(v) = p.peak_lr {
            stage_cfg.peak_lr = v;
        }
        if let Some(v) = p.min_lr {
            stage_cfg.min_lr = v;
        }
        if let Some(v) = p.warmup_steps {
            stage_cfg.warmup_steps = v;
        }
        if let Some(v) = p.total_steps {
            stage_cfg.total_steps = v;
        }
        if let Some(v) = p.freeze {
            stage_cfg.freeze = v;
        }
        if let Some(v) = p.grad_accum {
            stage_cfg.grad_accum = v;
        }
        if let Some(v) = p.max_seq_len {
            stage_cfg.max_seq_len = v;
        }
        if let Some(v) = p.weight_decay {
            stage_cfg.weight_decay = v;
        }
        if let Some(v) = p.objective {
            stage_cfg.objective = v;
        }
        if let Some(v) = p.dpo_beta {
            stage_cfg.dpo_beta = v;
        }
    }
    stage_cfg.validate()?;

    let mut data = DataParams::defaults(variant, stage);
    if let Some(p) = file.data {
        if let Some(v) = p.micro_batch {
            data.micro_batch = v;
        }
        if let Some(v) = p.glyph_image_size {
            data.glyph_image_size = v;
        }
        if let Some(v) = p.glyph_count {
            data.glyph_count = v;
        }
        if let Some(v) = p.eval_samples {
            data.eval_samples = v;
        }
    }
    if data.micro_batch == 0 {
        return Err(bad("data.micro_batch: must be >= 1"));
    }
    if data.eval_samples == 0 {
        return Err(bad("data.eval_samples: must be >= 1"));
    }

    let checkpoint_every = match file.checkpoint_every {
        Some(0) => return Err(bad("checkpoint_every: must be >= 1")),
        Some(v) => v,
        None => (stage_cfg.total_steps / 4).max(1),
    };

    Ok(ResolvedConfig {
        model,
        stage,
        seed,
        outdir,
        table2_lr,
        checkpoint_every,
        init_from: file.init_from,
        stage_cfg,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cli(stage: u8) -> CliOverrides {
        CliOverrides {
            model: Some("toy".into()),
            stage: Some(stage),
            seed: Some(7),
            outdir: Some(PathBuf::from("out")),
            table2_lr: false,
        }
    }

    #[test]
    fn empty_config_with_flags_resolves_to_defaults() {
        let r = resolve(
            parse_config("{}").unwrap(),
            CliOverrides {
                model: Some("1b".into()),
                stage: Some(1),
                ..CliOverrides::default()
            },
            Fallback::default(),
        )
        .unwrap();
        assert_eq!(r.stage_cfg.peak_lr, 3e-4);
        assert_eq!(r.stage_cfg.total_steps, 35_000);
        assert_eq!(r.seed, 0);
        assert_eq!(r.checkpoint_every, 35_000 / 4);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = parse_config(r#"{"stage_cfg": {"grad_accumm": 2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage_cfg.grad_accumm"), "got: {msg}");
        let err = parse_config(r#"{"modle": "toy"}"#).unwrap_err();
        assert!(err.to_string().contains("modle"), "got: {err}");
    }

    #[test]
    fn invalid_patch_values_fail_validation_with_field_name() {
        let cfg = parse_config(r#"{"stage_cfg": {"grad_accum": 0}}"#).unwrap();
        let err = resolve(cfg, toy_cli(1), Fallback::default()).unwrap_err();
        assert!(err.to_string().contains("grad_accum"), "got: {err}");
    }

    #[test]
    fn stage_cross_check_conflicts_are_errors() {
        let cfg = parse_config(r#"{"stage_cfg": {"stage": 2}}"#).unwrap();
        let err = resolve(cfg, toy_cli(1), Fallback::default()).unwrap_err();
        assert!(err.to_string().contains("conflicts"), "got: {err}");
    }

    #[test]
    fn cli_flags_beat_file_values() {
        let cfg = parse_config(r#"{"model": "1b", "stage": 2, "seed": 3}"#).unwrap();
        let r = resolve(cfg, toy_cli(1), Fallback::default()).unwrap();
        assert_eq!(r.model, "toy");
        assert_eq!(r.stage, 1);
        assert_eq!(r.seed, 7);
    }

    #[test]
    fn resolved_echo_reproduces_itself() {
        let cfg = parse_config(
            r#"{"stage_cfg": {"total_steps": 50, "peak_lr": 0.002},
                "data": {"micro_batch": 2}}"#,
        )
        .unwrap();
        let first = resolve(cfg, toy_cli(3), Fallback::default()).unwrap();
        let echo = first.to_json();
        let reparsed = parse_config(&echo).unwrap();
        let second = resolve(reparsed, CliOverrides::default(), Fallback::default()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_model_or_stage_is_a_config_error() {
        let err = resolve(
            RunConfig::default(),
            CliOverrides::default(),
            Fallback::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("model"), "got: {err}");
        let err = resolve(
            RunConfig::default(),
            CliOverrides {
                model: Some("toy".into()),
                ..CliOverrides::default()
            },
            Fallback::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("stage"), "got: {err}");
    }
}
