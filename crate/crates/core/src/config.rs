//! Pipeline hyperparameters and their on-disk form.
//!
//! A config file is a flat JSON or TOML document whose keys mirror the
//! fields of [`PipelineConfig`]. Missing keys take the defaults; unknown
//! keys are rejected. A second overlay file may override any subset of the
//! keys (per-dataset settings on top of per-model settings).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dump::HeadId;
use crate::error::{Error, Result};
use crate::gate::GateThresholds;
use crate::interval::IntervalParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Variant {
    #[default]
    HardCrop,
    SoftMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of TG-Heads.
    pub k_heads: usize,
    /// Entropy temperature.
    pub tau: f64,
    /// Gaussian smoothing standard deviation, in frames.
    pub sigma: f64,
    /// Binarization threshold as a fraction of the curve maximum.
    pub rho: f64,
    /// Dilation window in seconds.
    pub delta_s: f64,
    /// Fraction of the segment length added on each side.
    pub expansion_r: f64,
    pub theta_dec: f64,
    pub theta_attn: f64,
    pub stage2_variant: Stage2Variant,
    /// Floor inside the debiasing log-ratio.
    pub epsilon: f64,
    /// Heads to read from each dump. `None` uses every head in the positive dump.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tg_heads: Option<Vec<HeadId>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_heads: 5,
            tau: 0.5,
            sigma: 2.0,
            rho: 0.2,
            delta_s: 5.0,
            expansion_r: 0.15,
            theta_dec: 0.9,
            theta_attn: 0.9,
            stage2_variant: Stage2Variant::HardCrop,
            epsilon: 1e-8,
            tg_heads: None,
        }
    }
}

/// Partial config applied on top of a base config.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub k_heads: Option<usize>,
    pub tau: Option<f64>,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub delta_s: Option<f64>,
    pub expansion_r: Option<f64>,
    pub theta_dec: Option<f64>,
    pub theta_attn: Option<f64>,
    pub stage2_variant: Option<Stage2Variant>,
    pub epsilon: Option<f64>,
    pub tg_heads: Option<Vec<HeadId>>,
}

impl PipelineConfig {
    pub fn interval_params(&self) -> IntervalParams {
        IntervalParams {
            threshold_ratio: self.rho,
            dilation_s: self.delta_s,
            expansion_ratio: self.expansion_r,
        }
    }

    pub fn thresholds(&self) -> GateThresholds {
        GateThresholds {
            theta_dec: self.theta_dec,
            theta_attn: self.theta_attn,
        }
    }

    pub fn apply(&mut self, overlay: ConfigOverlay) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = overlay.$f { self.$f = v; } )* };
        }
        take!(k_heads, tau, sigma, rho, delta_s, expansion_r, theta_dec, theta_attn, stage2_variant, epsilon);
        if overlay.tg_heads.is_some() {
            self.tg_heads = overlay.tg_heads;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::validation(field, msg)) };
        check(self.k_heads >= 1, "k_heads", "must be >= 1")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", "must be > 0")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma", "must be >= 0")?;
        self.interval_params().validate()?;
        self.thresholds().validate()?;
        check(self.epsilon > 0.0 && self.epsilon.is_finite(), "epsilon", "must be > 0")?;
        if let Some(heads) = &self.tg_heads {
            check(!heads.is_empty(), "tg_heads", "must not be empty when given")?;
            let mut sorted = heads.clone();
            sorted.sort();
            sorted.dedup();
            check(sorted.len() == heads.len(), "tg_heads", "duplicate head")?;
        }
        Ok(())
    }

    /// Parses a config document; the format is chosen by extension (`.toml`, otherwise JSON).
    pub fn from_str_with_format(text: &str, toml_format: bool) -> Result<Self> {
        let cfg: Self = if toml_format {
            toml::from_str(text).map_err(|e| Error::validation("config", e.to_string()))?
        } else {
            serde_json::from_str(text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `base` (or defaults when `None`) and applies `overlay` if given.
    pub fn load(base: Option<&Path>, overlay: Option<&Path>) -> Result<Self> {
        let mut cfg = match base {
            Some(path) => Self::from_str_with_format(&std::fs::read_to_string(path)?, is_toml(path))?,
            None => Self::default(),
        };
        if let Some(path) = overlay {
            let text = std::fs::read_to_string(path)?;
            let ov: ConfigOverlay = if is_toml(path) {
                toml::from_str(&text).map_err(|e| Error::validation("config overlay", e.to_string()))?
            } else {
                serde_json::from_str(&text)?
            };
            cfg.apply(ov);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}
