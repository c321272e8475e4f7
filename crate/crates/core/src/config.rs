//! Model, loss, inference and training configuration.
//!
//! Defaults are the desk-scale settings; [`ModelConfig::paper_charades`]
//! keeps the full-size constants as a named preset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::OptimizerKind;

/// How the sentence conditions each prediction-serving feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    /// Per-unit attention over words drives scale and shift.
    Scdm,
    /// Scale and shift from the global sentence vector, shared by all units.
    Scm,
    /// Elementwise product with the global sentence vector.
    Mul,
    /// One fully connected layer over `(unit || global sentence)`.
    Fc,
    /// Plain batch normalization, no sentence input.
    None,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 5] = [
        ConditioningMode::Scdm,
        ConditioningMode::Scm,
        ConditioningMode::Mul,
        ConditioningMode::Fc,
        ConditioningMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Scdm => "scdm",
            ConditioningMode::Scm => "scm",
            ConditioningMode::Mul => "mul",
            ConditioningMode::Fc => "fc",
            ConditioningMode::None => "none",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditioningMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown conditioning mode {s:?}")))
    }
}

/// Where conditioning sits relative to each layer's activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulatePosition {
    AfterActivation,
    BeforeActivation,
}

/// Which units share the normalization statistics of modulated maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    /// Temporal statistics of each map on its own.
    Instance,
    /// Statistics over batch and time while training, running averages
    /// at inference.
    Batch,
}

/// Residual space of the location loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocLossSpace {
    /// Smooth-L1 between predicted and target offsets `(dc, dw)`.
    Offset,
    /// Smooth-L1 between decoded and ground-truth `(center, width)`.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Input clip count after truncate/pad.
    pub input_length: usize,
    pub num_layers: usize,
    pub d_v: usize,
    pub d_embed: usize,
    /// Word-state width; each recurrent direction gets half.
    pub d_s: usize,
    pub d_f: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub ratios: Vec<f64>,
    pub mode: ConditioningMode,
    pub modulate_position: ModulatePosition,
    pub share_scdm_params: bool,
    pub norm_scope: NormScope,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub alpha_c: f64,
    pub alpha_w: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            input_length: 64,
            num_layers: 6,
            d_v: 16,
            d_embed: 32,
            d_s: 32,
            d_f: 32,
            d_h: 32,
            d_a: 32,
            ratios: vec![0.25, 0.5, 0.75, 1.0],
            mode: ConditioningMode::Scdm,
            modulate_position: ModulatePosition::AfterActivation,
            share_scdm_params: false,
            norm_scope: NormScope::Batch,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
            alpha_c: 0.1,
            alpha_w: 0.1,
        }
    }
}

impl ModelConfig {
    /// Full-size constants for 64-clip inputs with six layers.
    pub fn paper_charades(vocab_size: usize, d_v: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_v,
            d_embed: 300,
            d_s: 512,
            d_f: 512,
            d_h: 512,
            d_a: 512,
            ..ModelConfig::default()
        }
    }

    /// Temporal extent of every backbone layer output.
    pub fn layer_lengths(&self) -> Vec<usize> {
        (1..=self.num_layers).map(|k| self.input_length >> k).collect()
    }

    /// Layers that feed the prediction head (all but the first).
    pub fn prediction_lengths(&self) -> Vec<usize> {
        self.layer_lengths().into_iter().skip(1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return cfg("need at least two layers (the first never predicts)".into());
        }
        if self.num_layers >= usize::BITS as usize
            || !self.input_length.is_multiple_of(1 << self.num_layers)
            || self.input_length >> self.num_layers == 0
        {
            return cfg(format!(
                "input length {} is not divisible by 2^{}",
                self.input_length, self.num_layers
            ));
        }
        if !self.d_s.is_multiple_of(2) {
            return cfg(format!("d_s = {} must be even (two recurrent directions)", self.d_s));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_v", self.d_v),
            ("d_embed", self.d_embed),
            ("d_s", self.d_s),
            ("d_f", self.d_f),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return cfg("vocabulary needs at least one token besides PAD".into());
        }
        if self.ratios.is_empty() {
            return cfg("empty ratio set".into());
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return cfg(format!("ratios {:?} must lie in (0, 1]", self.ratios));
        }
        if self.mode == ConditioningMode::Mul && self.d_s != self.d_h {
            return cfg(format!("mul mode needs d_s == d_h, got {} and {}", self.d_s, self.d_h));
        }
        if !(self.norm_eps > 0.0) {
            return cfg("norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub eta: f64,
    pub positive_iou: f64,
    pub loc_loss_space: LocLossSpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 100.0, eta: 10.0, positive_iou: 0.5, loc_loss_space: LocLossSpace::Offset }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub nms_threshold: f64,
    pub max_keep: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { nms_threshold: 0.55, max_keep: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub infer: InferConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Cap on validation queries per evaluation (0 = all).
    pub eval_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            infer: InferConfig::default(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            steps: 2000,
            batch_size: 16,
            seed: 0,
            eval_every: 250,
            eval_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.infer.nms_threshold > 0.0 && self.infer.nms_threshold <= 1.0) {
            return Err(Error::Config("nms threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layer_schedule() {
        let c = ModelConfig::default();
        assert_eq!(c.layer_lengths(), vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(c.prediction_lengths(), vec![16, 8, 4, 2, 1]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_length() {
        let c = ModelConfig { input_length: 48, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { input_length: 32, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mul_needs_matching_widths() {
        let c = ModelConfig { mode: ConditioningMode::Mul, d_h: 16, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parsing() {
        for m in ConditioningMode::ALL {
            assert_eq!(m.as_str().parse::<ConditioningMode>().unwrap(), m);
        }
        assert!("film".parse::<ConditioningMode>().is_err());
    }
}
