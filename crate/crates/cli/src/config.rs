//! Flat key=value run configuration with three override layers: config
//! file, then POSEGRAFT_* environment variables, then command-line flags.

use anyhow::{bail, Context, Result};
use posegraft_core::denoiser::{ArchConfig, ADAPTER_TARGETS};
use posegraft_core::guidance::SamplerKind;
use posegraft_core::schedule::ScheduleKind;
use std::collections::BTreeMap;
use std::path::Path;

pub const ENV_PREFIX: &str = "POSEGRAFT_";

/// Every tunable of the pipeline. Defaults follow the reference settings:
/// n_tr = 500, s_a = 1e-6, s_p = 1e-3, k = 5, t_steps = 50.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // dataset
    pub n_subjects: usize,
    pub n_actions: usize,
    // schedule
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    // architecture
    pub base_width: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
    // base training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    // adapters & finetuning
    pub adapter_rank: usize,
    pub n_tr: usize,
    pub finetune_lr: f64,
    // guided sampling
    pub s_a: f64,
    pub s_p: f64,
    pub k: usize,
    pub t_steps: usize,
    pub cfg_scale: f64,
    pub sampler: String,
    // evaluation
    pub eval_seeds: usize,
    pub eval_pairs: usize,
    // root seed
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_actions: 15,
            schedule: ScheduleKind::Linear,
            train_steps: 1000,
            base_width: 32,
            emb_dim: 128,
            cond_dim: 32,
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            cond_dropout: 0.1,
            adapter_rank: 4,
            n_tr: 500,
            finetune_lr: 1e-4,
            s_a: 1e-6,
            s_p: 1e-3,
            k: 5,
            t_steps: 50,
            cfg_scale: 3.0,
            sampler: "ddim".into(),
            eval_seeds: 5,
            eval_pairs: 0, // 0 = every pair
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            widths: [self.base_width, self.base_width * 2, self.base_width * 4],
            emb_dim: self.emb_dim,
            cond_dim: self.cond_dim,
            n_subjects: self.n_subjects,
            n_actions: self.n_actions,
            ..ArchConfig::default()
        }
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        match self.sampler.as_str() {
            "ddim" => Ok(SamplerKind::Ddim { eta: 0.0 }),
            "ddpm" => Ok(SamplerKind::Ddpm),
            other => bail!("unknown sampler {other:?} (expected ddim or ddpm)"),
        }
    }

    pub fn adapter_targets(&self) -> Vec<String> {
        ADAPTER_TARGETS.iter().map(|s| s.to_string()).collect()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ctx = || format!("invalid value {v:?} for key {key:?}");
        match key {
            "n_subjects" => self.n_subjects = v.parse().with_context(ctx)?,
            "n_actions" => self.n_actions = v.parse().with_context(ctx)?,
            "schedule" => self.schedule = v.parse().map_err(|e| anyhow::anyhow!("{e}"))?,
            "train_steps" => self.train_steps = v.parse().with_context(ctx)?,
            "base_width" => self.base_width = v.parse().with_context(ctx)?,
            "emb_dim" => self.emb_dim = v.parse().with_context(ctx)?,
            "cond_dim" => self.cond_dim = v.parse().with_context(ctx)?,
            "epochs" => self.epochs = v.parse().with_context(ctx)?,
            "batch_size" => self.batch_size = v.parse().with_context(ctx)?,
            "lr" => self.lr = v.parse().with_context(ctx)?,
            "cond_dropout" => self.cond_dropout = v.parse().with_context(ctx)?,
            "adapter_rank" => self.adapter_rank = v.parse().with_context(ctx)?,
            "n_tr" => self.n_tr = v.parse().with_context(ctx)?,
            "finetune_lr" => self.finetune_lr = v.parse().with_context(ctx)?,
            "s_a" => self.s_a = v.parse().with_context(ctx)?,
            "s_p" => self.s_p = v.parse().with_context(ctx)?,
            "k" => self.k = v.parse().with_context(ctx)?,
            "t_steps" => self.t_steps = v.parse().with_context(ctx)?,
            "cfg_scale" => self.cfg_scale = v.parse().with_context(ctx)?,
            "sampler" => self.sampler = v.to_string(),
            "eval_seeds" => self.eval_seeds = v.parse().with_context(ctx)?,
            "eval_pairs" => self.eval_pairs = v.parse().with_context(ctx)?,
            "seed" => self.seed = v.parse().with_context(ctx)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                );
            };
            self.set(key.trim(), value)
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// Applies POSEGRAFT_<KEY> environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        for (key, value) in std::env::vars() {
            if let Some(stripped) = key.strip_prefix(ENV_PREFIX) {
                let key_lower = stripped.to_ascii_lowercase();
                self.set(&key_lower, &value)
                    .with_context(|| format!("environment variable {key}"))?;
            }
        }
        Ok(())
    }

    /// All settings as a sorted key=value map, the same format the config
    /// file uses; written into output sidecars.
    pub fn as_key_values(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("n_subjects".into(), self.n_subjects.to_string());
        m.insert("n_actions".into(), self.n_actions.to_string());
        m.insert(
            "schedule".into(),
            match self.schedule {
                ScheduleKind::Linear => "linear".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
        );
        m.insert("train_steps".into(), self.train_steps.to_string());
        m.insert("base_width".into(), self.base_width.to_string());
        m.insert("emb_dim".into(), self.emb_dim.to_string());
        m.insert("cond_dim".into(), self.cond_dim.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("lr".into(), format!("{}", self.lr));
        m.insert("cond_dropout".into(), format!("{}", self.cond_dropout));
        m.insert("adapter_rank".into(), self.adapter_rank.to_string());
        m.insert("n_tr".into(), self.n_tr.to_string());
        m.insert("finetune_lr".into(), format!("{}", self.finetune_lr));
        m.insert("s_a".into(), format!("{}", self.s_a));
        m.insert("s_p".into(), format!("{}", self.s_p));
        m.insert("k".into(), self.k.to_string());
        m.insert("t_steps".into(), self.t_steps.to_string());
        m.insert("cfg_scale".into(), format!("{}", self.cfg_scale));
        m.insert("sampler".into(), self.sampler.clone());
        m.insert("eval_seeds".into(), self.eval_seeds.to_string());
        m.insert("eval_pairs".into(), self.eval_pairs.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

/// Parses a key=value sidecar/meta file back into a map.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("expected key=value, got {raw:?}");
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
