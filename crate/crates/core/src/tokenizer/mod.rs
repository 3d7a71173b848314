//! Multi-scale residual action tokenizer.
//!
//! Each action dimension gets its own [`DimTokenizer`]: a 1-D conv encoder
//! compresses an `H`-step column to an `L x C` feature map, which is then
//! quantized coarse-to-fine into `K` token maps of lengths `l_1 < ... < l_K`
//! against one cosine-distance codebook shared across scales.

mod codebook;
mod dim;
pub mod rot6d;

pub use codebook::{quantize_nearest, Codebook};
pub use dim::{DimTokenizer, TokenizerForward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Steps per action chunk (H).
    pub horizon: usize,
    /// Token-map length per scale (l_1..l_K).
    pub scale_lens: Vec<usize>,
    /// Temporal length of the feature map (L).
    pub feature_len: usize,
    /// Code dimension (C).
    pub code_dim: usize,
    /// Codebook size (V).
    pub codebook_size: usize,
    /// Hidden conv widths of the encoder; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub commit_weight: f32,
    pub quant_weight: f32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::with_scales(4)
    }
}

impl TokenizerConfig {
    /// `K` scales of lengths `1..=K`; the feature map grows to `K` once `K`
    /// exceeds the default length of 4.
    pub fn with_scales(k: usize) -> Self {
        TokenizerConfig {
            horizon: 16,
            scale_lens: (1..=k).collect(),
            feature_len: k.max(4),
            code_dim: 8,
            codebook_size: 512,
            channels: vec![32, 64],
            commit_weight: 1.0,
            quant_weight: 1.0,
        }
    }

    /// Preset with the conventional 0.25 commitment weight.
    pub fn with_low_commit(mut self) -> Self {
        self.commit_weight = 0.25;
        self
    }

    pub fn num_scales(&self) -> usize {
        self.scale_lens.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.scale_lens.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let lens = &self.scale_lens;
        if lens.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if lens[0] < 1 || lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scale lengths must be strictly increasing from 1: {lens:?}")));
        }
        let last = *lens.last().unwrap();
        if last > self.feature_len || self.feature_len > self.horizon {
            return Err(Error::Config(format!(
                "need l_K ({last}) <= L ({}) <= H ({})",
                self.feature_len, self.horizon
            )));
        }
        if self.codebook_size < 2 || self.code_dim < 1 {
            return Err(Error::Config(format!(
                "codebook needs V >= 2 and C >= 1, got V={} C={}",
                self.codebook_size, self.code_dim
            )));
        }
        Ok(())
    }
}

/// Tokens of one action dimension at one scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    /// 1-based scale index.
    pub scale: usize,
    pub tokens: Vec<usize>,
}

/// `K` token maps for each of the `D` action dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleTokens {
    pub dims: Vec<Vec<TokenMap>>,
}

impl MultiScaleTokens {
    pub fn num_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn num_scales(&self) -> usize {
        self.dims.first().map_or(0, Vec::len)
    }

    /// Checks the per-dimension structure against a config.
    pub fn validate(&self, config: &TokenizerConfig) -> Result<()> {
        for maps in &self.dims {
            if maps.len() != config.num_scales() {
                return Err(Error::Config(format!(
                    "expected {} token maps per dimension, got {}",
                    config.num_scales(),
                    maps.len()
                )));
            }
            for (k, m) in maps.iter().enumerate() {
                if m.scale != k + 1 || m.tokens.len() != config.scale_lens[k] {
                    return Err(Error::Config(format!(
                        "token map {} has scale {} and {} tokens",
                        k + 1,
                        m.scale,
                        m.tokens.len()
                    )));
                }
                if let Some(&t) = m.tokens.iter().find(|&&t| t >= config.codebook_size) {
                    return Err(Error::TokenOutOfRange { token: t, size: config.codebook_size });
                }
            }
        }
        Ok(())
    }
}

/// `L x C` feature map of one action column, row-major by time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub len: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Channel-major copy, the layout the conv stack works in.
    pub(crate) fn to_channels_first(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.values.len()];
        for t in 0..self.len {
            for c in 0..self.channels {
                out[c * self.len + t] = self.values[t * self.channels + c];
            }
        }
        out
    }

    pub(crate) fn from_channels_first(channels: usize, len: usize, data: &[f32]) -> Self {
        let mut values = vec![0.0; channels * len];
        for c in 0..channels {
            for t in 0..len {
                values[t * channels + c] = data[c * len + t];
            }
        }
        FeatureMap { len, channels, values }
    }

    pub fn squared_distance(&self, other: &FeatureMap) -> f32 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}
