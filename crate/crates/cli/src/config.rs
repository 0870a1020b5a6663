//! Run configuration: one TOML file with a section per stage. Every key is
//! optional; missing keys take library defaults and each one is logged.

use anyhow::{bail, Context, Result};
use gpla_core::gpla::GplaConfig;
use gpla_core::grounding::{GroundingConfig, GroundingTrainConfig};
use gpla_core::policy::{DecoderConfig, LmConfig, SupervisedConfig};
use gpla_core::synthenv::dataset::WindowConfig;
use gpla_core::synthenv::TaskFamily;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub image_size: usize,
    pub task_families: Vec<TaskFamily>,
    /// Train / validation / test fractions at episode granularity.
    pub split: [f64; 3],
    pub idle_threshold: f32,
    pub horizon: usize,
    /// Keep every k-th training window (1 keeps all).
    pub train_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 400,
            image_size: 64,
            task_families: TaskFamily::ALL.to_vec(),
            split: [0.8, 0.1, 0.1],
            idle_threshold: 0.1,
            horizon: 8,
            train_stride: 1,
        }
    }
}

impl DataConfig {
    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            threshold: self.idle_threshold,
            horizon: self.horizon,
            image_size: self.image_size,
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cap on held-out samples used by rollout, score and embed (0 = all).
    pub max_samples: usize,
    /// Held-out split evaluated: "val" or "test".
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_samples: 0,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub grounding: GroundingConfig,
    pub grounding_train: GroundingTrainConfig,
    pub lm: LmConfig,
    pub decoder: DecoderConfig,
    pub supervised: SupervisedConfig,
    pub gpla: GplaConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML and returns the config plus the dotted paths of every key
    /// that was filled from defaults.
    pub fn from_toml(text: &str) -> Result<(Self, Vec<String>)> {
        let user: toml::Table = toml::from_str(text).context("invalid configuration TOML")?;
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        let defaults = toml::Table::try_from(RunConfig::default())
            .context("serializing default configuration")?;
        let mut filled = Vec::new();
        missing_keys(&defaults, &user, "", &mut filled);
        cfg.validate()?;
        Ok((cfg, filled))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.episodes < 3 {
            bail!("data.episodes must be at least 3, got {}", d.episodes);
        }
        if d.image_size == 0 || d.horizon == 0 || d.train_stride == 0 {
            bail!("data.image_size, data.horizon and data.train_stride must be positive");
        }
        if d.task_families.is_empty() {
            bail!("data.task_families must not be empty");
        }
        if !(d.idle_threshold >= 0.0 && d.idle_threshold.is_finite()) {
            bail!(
                "data.idle_threshold must be a non-negative number, got {}",
                d.idle_threshold
            );
        }
        gpla_core::synthenv::dataset::split_episode_indices(d.episodes, d.fractions(), 0)
            .map_err(|e| anyhow::anyhow!("data.split: {e}"))?;
        self.grounding.validate()?;
        self.grounding_train.validate()?;
        self.lm.validate()?;
        self.decoder.validate()?;
        self.supervised.validate()?;
        self.gpla.validate()?;
        for (name, v) in [
            ("grounding.horizon", self.grounding.horizon),
            ("decoder.horizon", self.decoder.horizon),
        ] {
            if v != d.horizon {
                bail!("{name} = {v} must equal data.horizon = {}", d.horizon);
            }
        }
        let mut sizes = vec![
            ("grounding.image_size", self.grounding.image_size),
            ("decoder.image_size", self.decoder.image_size),
        ];
        if self.lm.vision_prefix {
            sizes.push(("lm.image_size", self.lm.image_size));
        }
        for (name, v) in sizes {
            if v != d.image_size {
                bail!("{name} = {v} must equal data.image_size = {}", d.image_size);
            }
        }
        if !matches!(self.eval.split.as_str(), "val" | "test") {
            bail!(
                "eval.split must be \"val\" or \"test\", got {:?}",
                self.eval.split
            );
        }
        Ok(())
    }
}

fn missing_keys(defaults: &toml::Table, user: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in defaults {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, user.get(k)) {
            (toml::Value::Table(d), Some(toml::Value::Table(u))) => missing_keys(d, u, &path, out),
            (toml::Value::Table(d), None) => missing_keys(d, &toml::Table::new(), &path, out),
            (_, None) => out.push(format!("{path} = {v}")),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let (cfg, filled) = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(filled
            .iter()
            .any(|k| k.starts_with("grounding.gamma_div = ")));
        assert!(filled.iter().any(|k| k.starts_with("seed = ")));
    }

    #[test]
    fn given_keys_are_not_reported_as_defaults() {
        let (cfg, filled) = RunConfig::from_toml("seed = 7\n[gpla]\nlr = 1e-6\n").unwrap();
        assert_eq!((cfg.seed, cfg.gpla.lr), (7, 1e-6));
        assert!(!filled
            .iter()
            .any(|k| k.starts_with("seed ") || k.starts_with("gpla.lr ")));
        assert!(filled.iter().any(|k| k.starts_with("gpla.n_s ")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[grounding]\nd_modle = 32\n").unwrap_err();
        assert!(format!("{err:#}").contains("d_modle"), "{err:#}");
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn out_of_range_values_name_the_field() {
        let err = RunConfig::from_toml("[grounding]\ngamma_div = -1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("gamma_div"), "{err:#}");
        let err = RunConfig::from_toml("[data]\nhorizon = 4\n").unwrap_err();
        assert!(format!("{err:#}").contains("horizon"), "{err:#}");
    }

    #[test]
    fn parse_errors_carry_a_location() {
        let err = RunConfig::from_toml("seed = \n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }
}
