use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::RegressionKind;
use crate::echozoom::{Interpolation, ZoomConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mfl::AggregatorKind;
use crate::ordinal::{BinScheme, BinSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Radam,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(Self::Radam),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything that determines a training run. Unknown JSON keys are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_length: usize,
    pub clip_stride: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm bound; absent disables clipping.
    pub grad_clip: Option<f64>,
    pub aggregator: AggregatorKind,
    pub echozoom: bool,
    pub upsample: Interpolation,
    pub resolution: usize,
    pub stage_channels: Vec<usize>,
    pub bin_scheme: BinScheme,
    pub bins: usize,
    pub temperature: f64,
    pub reg_loss: RegressionKind,
    pub reg_threshold: f64,
    /// Few-shot subset size per integer class; absent trains on all TRAIN rows.
    pub shots: Option<usize>,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// When false, metrics rows carry a wall time of 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            learning_rate: 5e-5,
            epochs: 100,
            batch_size: 2,
            clip_length: 48,
            clip_stride: 2,
            optimizer: OptimizerKind::Radam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            aggregator: AggregatorKind::Mfl,
            echozoom: true,
            upsample: Interpolation::Bilinear,
            resolution: 112,
            stage_channels: vec![8, 16, 32],
            bin_scheme: BinScheme::Uniform,
            bins: 10,
            temperature: 0.07,
            reg_loss: RegressionKind::Mae,
            reg_threshold: 1.0,
            shots: None,
            val_every: 1,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("reg_threshold", self.reg_threshold),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("clip_length", self.clip_length),
            ("clip_stride", self.clip_stride),
            ("val_every", self.val_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight_decay must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Validation("grad_clip must be positive".into()));
            }
        }
        if self.shots == Some(0) {
            return Err(Error::Validation("shots must be >= 1".into()));
        }
        self.encoder_config().validate().map_err(as_validation)?;
        self.bin_spec().map_err(as_validation)?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            stage_channels: self.stage_channels.clone(),
            base_resolution: self.resolution,
        }
    }

    pub fn zoom_config(&self) -> Option<ZoomConfig> {
        self.echozoom.then_some(ZoomConfig {
            base_res: self.resolution,
            upsample: self.upsample,
        })
    }

    pub fn bin_spec(&self) -> Result<BinSpec> {
        BinSpec::from_scheme(self.bin_scheme, self.bins)
    }

    /// Learning-rate multiplier `0.5 (1 + cos(pi e / epochs))` for epoch `e`.
    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        cosine_multiplier(epoch as f64, self.epochs as f64)
    }
}

pub fn cosine_multiplier(epoch: f64, epochs: f64) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * epoch / epochs).cos())
}

fn as_validation(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Shape(m) => Error::Validation(m),
        other => other,
    }
}
