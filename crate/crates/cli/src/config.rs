//! TOML experiment configuration and named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use lab_core::adapters::AdapterKind;
use lab_core::encoder::EncoderConfig;
use lab_core::model::ModelConfig;
use lab_core::policy::PolicyConfig;
use lab_core::scene::EnvConfig;
use lab_core::trainer::AdaptConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub kind: AdapterKind,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self { kind: AdapterKind::Ftm }
    }
}

/// Behavior cloning of the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Expert episodes in the dataset.
    pub episodes: usize,
    /// Off-trajectory agent positions labelled per episode.
    pub extra_states: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub images_per_batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Source-domain episodes scored after each round.
    pub eval_episodes: usize,
    pub target_success: f64,
    /// Training rounds of `steps` each before giving up.
    pub max_rounds: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            extra_states: 4,
            steps: 1500,
            batch_size: 32,
            images_per_batch: 8,
            peak_lr: 5e-3,
            min_lr: 5e-4,
            warmup_steps: 200,
            weight_decay: 0.0,
            eval_episodes: 200,
            target_success: 0.9,
            max_rounds: 2,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            adapter: AdapterKind::None,
            batch_size: self.batch_size,
            steps: self.steps,
            warmup_steps: self.warmup_steps.min(self.steps),
            decay_steps: self.steps,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            seed,
            ..AdaptConfig::ftm_reference()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Closed-loop episodes per cell.
    pub episodes: usize,
    /// Overrides the preset's adapters when non-empty.
    pub adapters: Vec<AdapterKind>,
    /// Overrides the preset's perturbations when non-empty; `none` is the
    /// unperturbed source domain.
    pub perturbations: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            adapters: Vec::new(),
            perturbations: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub adapter: AdapterSection,
    /// One-shot adaptation optimizer; `[adapter].kind` overrides its adapter.
    pub train: AdaptConfig,
    pub pretrain: PretrainConfig,
    pub env: EnvConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Adaptation schedule used at toy scale: a shorter warmup and a larger peak
/// rate than the reference schedules, which assume a far larger model.
pub fn toy_adapt_config() -> AdaptConfig {
    AdaptConfig {
        steps: 2000,
        warmup_steps: 100,
        decay_steps: 2000,
        peak_lr: 5e-3,
        min_lr: 5e-5,
        ..AdaptConfig::ftm_reference()
    }
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            adapter: AdapterSection::default(),
            train: toy_adapt_config(),
            pretrain: PretrainConfig::default(),
            env: EnvConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Names accepted by `--preset` for the experiment configuration.
    pub const PRESETS: [&'static str; 3] = ["toy", "reference", "smoke"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            // Full-length adaptation schedules.
            "reference" => Ok(Self {
                train: AdaptConfig::ftm_reference(),
                ..Self::toy()
            }),
            // Seconds-long runs for plumbing tests; no success target.
            "smoke" => Ok(Self {
                pretrain: PretrainConfig {
                    episodes: 8,
                    extra_states: 1,
                    steps: 20,
                    images_per_batch: 4,
                    warmup_steps: 5,
                    eval_episodes: 5,
                    target_success: 0.0,
                    max_rounds: 1,
                    ..PretrainConfig::default()
                },
                train: AdaptConfig {
                    steps: 10,
                    warmup_steps: 2,
                    decay_steps: 10,
                    batch_size: 8,
                    ..toy_adapt_config()
                },
                sweep: SweepConfig {
                    episodes: 4,
                    ..SweepConfig::default()
                },
                ..Self::toy()
            }),
            other => Err(CliError::Usage(format!(
                "unknown preset '{other}' (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Parses `text` as overrides on top of the toy preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::toy().overlay(text)
    }

    /// Keys present in `text` replace the corresponding values of `self`;
    /// everything else keeps its current value.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(self).map_err(|e| CliError::Usage(e.to_string()))?;
        merge(&mut base, patch);
        let cfg: Self = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        base.overlay(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.env.validate()?;
        self.adapt_config().validate()?;
        self.pretrain.train_config(0).validate()?;
        if self.env.image_size != self.encoder.image_size {
            return Err(CliError::Usage(format!(
                "env.image_size {} differs from encoder.image_size {}",
                self.env.image_size, self.encoder.image_size
            )));
        }
        if self.sweep.episodes == 0 || self.pretrain.eval_episodes == 0 || self.pretrain.max_rounds == 0 {
            return Err(CliError::Usage("episode counts and max_rounds must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            policy: self.policy.clone(),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            adapter: self.adapter.kind,
            ..self.train.clone()
        }
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_toy_preset() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::toy());
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_toml(
            "[adapter]\nkind = \"fla-r8\"\n[train]\nsteps = 300\ndecay_steps = 300\n[env]\nhorizon = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.adapt_config().adapter, AdapterKind::Fla { rank: 8 });
        assert_eq!(cfg.train.steps, 300);
        assert_eq!(cfg.train.peak_lr, toy_adapt_config().peak_lr);
        assert_eq!(cfg.env.horizon, 10);
        assert!(ExperimentConfig::from_toml("[train]\nstepz = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn overlay_keeps_the_preset_elsewhere() {
        let smoke = ExperimentConfig::preset("smoke").unwrap();
        let cfg = smoke.overlay("[sweep]\nepisodes = 9\n").unwrap();
        assert_eq!(cfg.sweep.episodes, 9);
        assert_eq!(cfg.pretrain, smoke.pretrain);
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nwarmup_steps = 900\ndecay_steps = 100\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn presets_validate() {
        for p in ExperimentConfig::PRESETS {
            ExperimentConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }
}
