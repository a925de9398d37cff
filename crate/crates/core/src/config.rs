//! Training configuration: a flat key-value TOML document.
//!
//! Unset keys take their defaults; unknown keys and negative loss weights
//! are hard errors. `--set key=value` overrides are applied on the raw
//! document before validation, so they obey the same rules as file keys.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Loss-term ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Adversarial + patch contrastive losses on sim→real only.
    Cut,
    /// Adds the seg→real auxiliary translation.
    CutS,
    /// Adds the sim/seg semantic-consistency regularizer.
    CutSc,
    /// Class-conditional multi-domain training with cyclic and classification losses.
    ConPres,
}

/// Which loss terms a preset enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermMask {
    pub random_pairs: bool,
    pub seg_pair: bool,
    pub reg: bool,
    pub cyc: bool,
    pub cls: bool,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Cut, Preset::CutS, Preset::CutSc, Preset::ConPres];

    pub fn terms(self) -> TermMask {
        match self {
            Preset::Cut => TermMask { random_pairs: false, seg_pair: false, reg: false, cyc: false, cls: false },
            Preset::CutS => TermMask { random_pairs: false, seg_pair: true, reg: false, cyc: false, cls: false },
            Preset::CutSc => TermMask { random_pairs: false, seg_pair: true, reg: true, cyc: false, cls: false },
            Preset::ConPres => TermMask { random_pairs: true, seg_pair: true, reg: true, cyc: true, cls: true },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Cut => "cut",
            Preset::CutS => "cut_s",
            Preset::CutSc => "cut_sc",
            Preset::ConPres => "conpres",
        }
    }

    /// Encoder layers used for the contrastive loss when none are configured.
    pub fn default_nce_layers(self) -> Vec<LayerId> {
        use LayerId::*;
        match self {
            Preset::ConPres => vec![Input, Conv1, Conv2, Res1, Res2, Res3],
            _ => vec![Input, Conv1, Conv2, Res1, Res4],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String =
            s.chars().filter(|c| !matches!(c, '_' | '-' | '+' | ' ')).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "cut" => Ok(Preset::Cut),
            "cuts" => Ok(Preset::CutS),
            "cutsc" => Ok(Preset::CutSc),
            "conpres" => Ok(Preset::ConPres),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

impl Serialize for Preset {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Encoder taps available to the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerId {
    /// The (padded) input image itself.
    Input,
    /// First stride-2 convolution block.
    Conv1,
    /// Second stride-2 convolution block.
    Conv2,
    Res1,
    Res2,
    Res3,
    Res4,
}

impl LayerId {
    pub const ALL: [LayerId; 7] =
        [LayerId::Input, LayerId::Conv1, LayerId::Conv2, LayerId::Res1, LayerId::Res2, LayerId::Res3, LayerId::Res4];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::Input => "input",
            LayerId::Conv1 => "conv1",
            LayerId::Conv2 => "conv2",
            LayerId::Res1 => "res1",
            LayerId::Res2 => "res2",
            LayerId::Res3 => "res3",
            LayerId::Res4 => "res4",
        }
    }

    /// Position along the encoder; `Input` is 0.
    pub fn depth(self) -> usize {
        self as usize
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown encoder layer `{s}`")))
    }
}

/// Weight initialization for every network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean Gaussian with std 0.02.
    #[default]
    Normal,
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`. Keeps activations at scale
    /// through the normalization-free decoder when networks are narrow.
    FanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lambda_cls_r: f64,
    pub lambda_cls_f: f64,
    pub lambda_reg: f64,
    pub lambda_cyc: f64,
    pub tau: f64,
    /// `None` selects the preset's default layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nce_layers: Option<Vec<LayerId>>,
    pub patches_per_layer: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Generator base width (first encoder conv channels).
    pub gen_width: usize,
    /// Discriminator base width (first conv channels).
    pub disc_width: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub init: InitScheme,
    pub checkpoint_every: u64,
    pub preview_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::ConPres,
            lambda_cls_r: 0.1,
            lambda_cls_f: 0.1,
            lambda_reg: 1.0,
            lambda_cyc: 10.0,
            tau: 0.07,
            nce_layers: None,
            patches_per_layer: 256,
            lr: 2e-4,
            betas: [0.5, 0.999],
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            gen_width: 64,
            disc_width: 64,
            proj_hidden: 256,
            embed_dim: 256,
            init: InitScheme::Normal,
            checkpoint_every: 500,
            preview_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn nce_layers(&self) -> Vec<LayerId> {
        self.nce_layers.clone().unwrap_or_else(|| self.preset.default_nce_layers())
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_cls_r", self.lambda_cls_r),
            ("lambda_cls_f", self.lambda_cls_f),
            ("lambda_reg", self.lambda_reg),
            ("lambda_cyc", self.lambda_cyc),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm must be > 0, got {}", self.grad_clip_norm)));
        }
        if self.patches_per_layer < 2 {
            return Err(Error::Config("patches_per_layer must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.gen_width == 0 || self.disc_width == 0 || self.proj_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        if let Some(layers) = &self.nce_layers {
            if layers.is_empty() {
                return Err(Error::Config("nce_layers must not be empty".into()));
            }
        }
        Ok(())
    }

    /// Parses a TOML document, then applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, value) =
                ov.split_once('=').ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_override_value(value.trim()));
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    load_config_with(path, &[])
}

pub fn load_config_with(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::parse(&text, overrides)
}
