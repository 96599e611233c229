use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dgs::{make_p, DgsConfig};
use crate::error::{Error, Result};
use crate::metrics::NC_THRESHOLD;
use crate::tasks::{gen_watermark, Task, WatermarkPattern, WatermarkSpec, MIN_IMAGE_SIZE};
use crate::watermark::VictimTrainConfig;

/// Salt separating the `P` draw from the dataset stream of the same seed.
const P_SEED_SALT: u64 = 0x5047_5348;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgsSettings {
    pub enabled: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub nc_threshold: f64,
    pub watermark_pattern: WatermarkPattern,
}

impl Default for DgsSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda_min: 1e-5,
            lambda_max: 1e-4,
            nc_threshold: NC_THRESHOLD,
            watermark_pattern: WatermarkPattern::Logo,
        }
    }
}

/// Everything one pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    pub image_size: usize,
    pub dataset_count: usize,
    pub victim: VictimTrainConfig,
    pub attack: AttackConfig,
    pub dgs: DgsSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Derain,
            image_size: 32,
            dataset_count: 256,
            victim: VictimTrainConfig::default(),
            attack: AttackConfig::default(),
            dgs: DgsSettings::default(),
        }
    }
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Checks every nested invariant; errors carry the dotted field path.
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE || !self.image_size.is_multiple_of(2) {
            return Err(config_err(
                "image_size",
                format!("must be even and at least {MIN_IMAGE_SIZE}, got {}", self.image_size),
            ));
        }
        if self.dataset_count < 3 {
            return Err(config_err(
                "dataset_count",
                format!("must be at least 3, got {}", self.dataset_count),
            ));
        }
        self.victim
            .check()
            .map_err(|(f, m)| config_err(format!("victim.{f}"), m))?;
        self.attack
            .check()
            .map_err(|(f, m)| config_err(format!("attack.{f}"), m))?;
        let d = &self.dgs;
        if !(d.lambda_min.is_finite() && d.lambda_min > 0.0) {
            return Err(config_err(
                "dgs.lambda_min",
                format!("must be positive, got {}", d.lambda_min),
            ));
        }
        if !(d.lambda_max.is_finite() && d.lambda_max >= d.lambda_min) {
            return Err(config_err(
                "dgs.lambda_max",
                format!("must be at least lambda_min {}, got {}", d.lambda_min, d.lambda_max),
            ));
        }
        if !(d.nc_threshold > 0.0 && d.nc_threshold < 1.0) {
            return Err(config_err(
                "dgs.nc_threshold",
                format!("must lie in (0, 1), got {}", d.nc_threshold),
            ));
        }
        Ok(())
    }

    pub fn wspec(&self) -> Result<WatermarkSpec> {
        gen_watermark(self.image_size, self.dgs.watermark_pattern)
    }

    /// Shield configuration; `P` is drawn from the experiment seed.
    pub fn dgs_config(&self, wspec: &WatermarkSpec) -> Result<DgsConfig> {
        let d = &self.dgs;
        let p = make_p(
            self.image_size * self.image_size,
            d.lambda_min,
            d.lambda_max,
            self.seed ^ P_SEED_SALT,
        )?;
        DgsConfig::new(Some(p), wspec.w.clone(), wspec.w0.clone(), d.nc_threshold, d.enabled)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a JSON config; unknown or mistyped fields are
/// reported with their path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_err("", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{LossVariant, PostProcess};

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn non_default_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.attack.loss_variant = LossVariant::L2Consistent;
        cfg.attack.post_process = Some(PostProcess::Lattice { step: 6 });
        cfg.dgs.watermark_pattern = WatermarkPattern::Checker;
        cfg.task = Task::Style;
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = parse_config(r#"{"seed": 9, "attack": {"steps": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.attack.steps, 10);
        assert_eq!(cfg.attack.batch, 8);
        assert_eq!(cfg.image_size, 32);
    }

    fn path_of(text: &str) -> String {
        match parse_config(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(path_of(r#"{"attack": {"beta1": -1}}"#), "attack.beta1");
        assert_eq!(path_of(r#"{"attack": {"loss_variant": "l3"}}"#), "attack.loss_variant");
        assert_eq!(path_of(r#"{"dgs": {"lambda_min": 0}}"#), "dgs.lambda_min");
        assert_eq!(
            path_of(r#"{"dgs": {"lambda_min": 1e-3, "lambda_max": 1e-4}}"#),
            "dgs.lambda_max"
        );
        assert_eq!(path_of(r#"{"victim": {"batch": 0}}"#), "victim.batch");
        assert_eq!(path_of(r#"{"image_size": 15}"#), "image_size");
        assert_eq!(
            path_of(r#"{"attack": {"loss_variant": "l2_consistent", "batch": 5}}"#),
            "attack.batch"
        );
        assert!(path_of(r#"{"victim": {"bogus": 1}}"#).starts_with("victim"));
    }

    #[test]
    fn dgs_config_follows_settings() {
        let cfg = ExperimentConfig::default();
        let ws = cfg.wspec().unwrap();
        let d = cfg.dgs_config(&ws).unwrap();
        assert!(d.is_active());
        assert_eq!(d.p().unwrap().dim(), 32 * 32);
        let mut off = cfg.clone();
        off.dgs.enabled = false;
        assert!(!off.dgs_config(&ws).unwrap().is_active());
    }
}
