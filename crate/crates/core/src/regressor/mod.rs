//! A small symmetric two-branch transformer that regresses the relative pose
//! between two images.
//!
//! Both images are patchified, embedded and encoded by the same ViT encoder.
//! Each branch then runs a decoder that cross-attends to the other branch's
//! encoder features, and a pose head maps the mean-pooled decoder tokens to a
//! rotation (9D, 4D or 3D parameterization) and a translation direction.
//! There is a single set of weights, so swapping the inputs swaps the outputs
//! exactly.
//!
//! Gradients are derived by hand and checked against finite differences in
//! the tests. The model is meant for overfitting experiments on procedural
//! images, not for real imagery.

mod checkpoint;
mod layers;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{rope_apply, TensorInfo};
pub use model::{extract_patches, Image, LossParts, TokenSequence, ToyModel, ToyPrediction};
pub use train::{
    procedural_image, synthetic_pairs, train_toy, write_trace_csv, Adam, ToyModelProvider,
    TraceRow, TrainingPair,
};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RegressorError> = std::result::Result<T, E>;

/// Rotation parameterization and translation supervision of the pose head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum HeadMode {
    #[default]
    #[serde(rename = "directional_9d")]
    Directional9d,
    #[serde(rename = "directional_4d")]
    Directional4d,
    #[serde(rename = "directional_3d")]
    Directional3d,
    /// 9D rotation, unit direction and a positive translation scale.
    #[serde(rename = "metric_9d")]
    Metric9d,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [
        HeadMode::Directional9d,
        HeadMode::Directional4d,
        HeadMode::Directional3d,
        HeadMode::Metric9d,
    ];

    pub fn rotation_dim(self) -> usize {
        match self {
            HeadMode::Directional9d | HeadMode::Metric9d => 9,
            HeadMode::Directional4d => 4,
            HeadMode::Directional3d => 3,
        }
    }

    pub fn is_metric(self) -> bool {
        self == HeadMode::Metric9d
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Directional9d => "directional_9d",
            HeadMode::Directional4d => "directional_4d",
            HeadMode::Directional3d => "directional_3d",
            HeadMode::Metric9d => "metric_9d",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "9d" | "directional_9d" => Ok(HeadMode::Directional9d),
            "4d" | "directional_4d" => Ok(HeadMode::Directional4d),
            "3d" | "directional_3d" => Ok(HeadMode::Directional3d),
            "metric" | "metric_9d" => Ok(HeadMode::Metric9d),
            other => Err(format!(
                "unknown head mode `{other}` (expected 9d, 4d, 3d or metric)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub head_layers: usize,
    pub attention_heads: usize,
    pub head_mode: HeadMode,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            token_dim: 32,
            encoder_blocks: 2,
            decoder_blocks: 2,
            head_layers: 2,
            attention_heads: 2,
            head_mode: HeadMode::Directional9d,
            rope_base: 100.0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegressorError::InvalidConfig(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be positive".into());
        }
        if self.token_dim == 0 || !self.token_dim.is_multiple_of(2 * self.attention_heads) {
            return bad(format!(
                "token_dim {} must be a positive multiple of 2 * attention_heads ({})",
                self.token_dim,
                2 * self.attention_heads
            ));
        }
        if !(self.token_dim / self.attention_heads).is_multiple_of(4) {
            return Err(RegressorError::DimensionMismatch(format!(
                "per-head width {} is not divisible by 4",
                self.token_dim / self.attention_heads
            )));
        }
        for (name, v) in [
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("head_layers", self.head_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!(
                "rope_base must be positive, got {}",
                self.rope_base
            ));
        }
        Ok(())
    }
}
