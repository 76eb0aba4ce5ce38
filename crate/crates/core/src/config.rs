//! Training configuration: JSON with every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::spectrum::scaled_mid_band;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// CSV training log.
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Inner radius of the preset band; scaled from 40 at 256 when absent.
    pub r_lo: Option<f64>,
    /// Outer radius of the preset band; scaled from 120 at 256 when absent.
    pub r_hi: Option<f64>,
    pub freeze_ae: bool,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            image_size: 256,
            batch_size: 16,
            lr: 1e-4,
            epochs: 100,
            loss_weights: LossWeights::default(),
            r_lo: None,
            r_hi: None,
            freeze_ae: true,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            paths: Paths::default(),
        }
    }
}

fn field(name: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: name.into(),
        msg: msg.into(),
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `(r_lo, r_hi)` after defaulting.
    pub fn radii(&self) -> (f64, f64) {
        let (lo, hi) = scaled_mid_band(self.image_size);
        (self.r_lo.unwrap_or(lo), self.r_hi.unwrap_or(hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(field("image_size", format!("must be a positive multiple of 16, got {}", self.image_size)));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(field("lr", format!("must be finite and ≥ 0, got {}", self.lr)));
        }
        self.loss_weights.validate()?;
        let (lo, hi) = self.radii();
        if !lo.is_finite() || lo < 0.0 {
            return Err(field("r_lo", format!("must be finite and ≥ 0, got {lo}")));
        }
        if hi.is_nan() || hi < lo {
            return Err(field("r_hi", format!("must be ≥ r_lo ({lo}), got {hi}")));
        }
        self.augment.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.radii(), (40.0, 120.0));
        let small = Config::from_json(r#"{"image_size": 64}"#).unwrap();
        assert_eq!(small.radii(), (10.0, 30.0));
    }

    #[test]
    fn validation_names_the_field() {
        let cases = [
            (r#"{"lr": -0.1}"#, "lr"),
            (r#"{"batch_size": 0}"#, "batch_size"),
            (r#"{"image_size": 30}"#, "image_size"),
            (r#"{"r_lo": 50, "r_hi": 20}"#, "r_hi"),
            (r#"{"loss_weights": {"lambda1": -1}}"#, "loss_weights.lambda1"),
            (r#"{"augment": {"flip": {"enabled": true, "p": 2}}}"#, "augment.flip"),
        ];
        for (json, name) in cases {
            match Config::from_json(json) {
                Err(Error::Config { field, .. }) => assert_eq!(field, name, "{json}"),
                other => panic!("{json}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trips_through_json() {
        let c = Config {
            seed: 9,
            r_hi: Some(50.0),
            ..Config::default()
        };
        let v = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&v).unwrap(), c);
    }
}
