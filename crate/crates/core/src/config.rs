//! TOML run configuration with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackKind, AttackQuantization, NoiseInit};
use crate::train::{PretrainConfig, TrainConfig};
use crate::{CodecConfig, Error, Result};

/// Attack settings shared by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackProfile {
    pub psnr_iterations: usize,
    pub bpp_iterations: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub init: NoiseInit,
    pub init_scale: f64,
    pub quantization: AttackQuantization,
}

impl Default for AttackProfile {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            psnr_iterations: 200,
            bpp_iterations: 200,
            epsilon: a.epsilon,
            step_size: a.step_size,
            init: a.init,
            init_scale: a.init_scale,
            quantization: a.quantization,
        }
    }
}

impl AttackProfile {
    /// Kodak evaluation: 1000 iterations per attack.
    pub fn kodak() -> Self {
        Self {
            psnr_iterations: 1000,
            bpp_iterations: 1000,
            ..Self::default()
        }
    }

    /// DIV2K evaluation: 500 iterations per attack.
    pub fn div2k() -> Self {
        Self {
            psnr_iterations: 500,
            bpp_iterations: 500,
            ..Self::default()
        }
    }

    pub fn config(&self, kind: AttackKind, seed: u64) -> AttackConfig {
        AttackConfig {
            kind,
            iterations: match kind {
                AttackKind::Psnr => self.psnr_iterations,
                AttackKind::Bpp => self.bpp_iterations,
            },
            epsilon: self.epsilon,
            step_size: self.step_size,
            seed,
            init: self.init,
            init_scale: self.init_scale,
            quantization: self.quantization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [AttackKind::Psnr, AttackKind::Bpp] {
            self.config(kind, 0).validate().map_err(|e| match e {
                Error::Config { field, reason } => {
                    let field = match (field.as_str(), kind) {
                        ("iterations", AttackKind::Psnr) => "psnr_iterations".to_string(),
                        ("iterations", AttackKind::Bpp) => "bpp_iterations".to_string(),
                        _ => field,
                    };
                    Error::config(format!("attack.{field}"), reason)
                }
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side of the square training crops.
    pub crop_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { crop_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub codec: CodecConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub attack: AttackProfile,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::toy(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            attack: AttackProfile::default(),
        }
    }
}

impl Config {
    /// Full-scale settings: 256 crops, 100-epoch schedules, Kodak attacks.
    pub fn full_scale() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::default(),
            data: DataConfig { crop_size: 256 },
            pretrain: PretrainConfig::full_scale(),
            train: TrainConfig::full_scale(),
            attack: AttackProfile::kodak(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let f = self.codec.downsampling_factor();
        if self.data.crop_size == 0 || self.data.crop_size % f != 0 {
            return Err(Error::config(
                "data.crop_size",
                format!("must be a positive multiple of {f}"),
            ));
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        self.attack.validate()
    }

    /// Parses TOML text, applies `key=value` overrides, then validates.
    /// Missing keys take their defaults; unknown keys are errors.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Canonical text: every field, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn digest(&self) -> String {
        crate::hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn attack(&self, kind: AttackKind) -> AttackConfig {
        self.attack.config(kind, self.seed)
    }
}

/// Canonical form of a config file.
pub fn normalize(text: &str) -> Result<String> {
    Ok(Config::parse(text, &[])?.to_toml())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::ConfigParse(format!("empty override key in `{spec}`")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::ConfigParse(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(Config::parse("", &[]).unwrap(), Config::default());
    }

    #[test]
    fn negative_epsilon_names_field() {
        match Config::parse("[attack]\nepsilon = -1.0\n", &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "attack.epsilon"),
            other => panic!("{other:?}"),
        }
        match Config::parse("[train]\nepsilon = -1.0\n", &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.epsilon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::parse("bogus = 1\n", &[]), Err(Error::ConfigParse(_))));
        assert!(matches!(
            Config::parse("[train]\nalpah = 1.0\n", &[]),
            Err(Error::ConfigParse(_))
        ));
        assert!(matches!(
            Config::parse("", &["train.alpah=1".into()]),
            Err(Error::ConfigParse(_))
        ));
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = Config::parse(
            "seed = 3\n[train]\nalpha = 2.0\n",
            &["train.alpha=0.5".into(), "train.distortion_target=clean".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.distortion_target, crate::train::DistortionTarget::Clean);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [Config::default(), Config::full_scale()] {
            cfg.validate().unwrap();
            assert_eq!(Config::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
        }
    }
}
