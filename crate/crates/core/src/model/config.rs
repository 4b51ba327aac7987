use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied to the attention scores `(E T_Q)(E T_K)ᵀ / √d_e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNormalizer {
    /// Scores are used as-is, with no normalization.
    Literal,
    /// Row-wise softmax over the scores.
    Softmax,
}

/// Squashing function used inside common-unit attention and feature
/// adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateNormalizer {
    /// Elementwise logistic `1 / (1 + e^{-x})`.
    Logistic,
    /// Row-wise softmax.
    SoftmaxRows,
}

/// Which representation feeds the style embedding extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeeInput {
    /// Projected extractor features, before the transformer stack.
    Extractor,
    /// Output of the last lightweight transformer layer.
    Transformer,
}

/// How a region-word cosine matrix becomes one pair similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPooling {
    /// Mean over words of the best-matching region.
    MaxMean,
    /// Cosine between the mean region vector and the mean word vector.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens per item `n`; inputs are padded or truncated to this count.
    pub tokens: usize,
    /// Visual input feature width.
    pub d_in: usize,
    /// Textual input feature width; defaults to `d_in`.
    pub d_in_text: Option<usize>,
    /// Common-space width `d_e`.
    pub d_e: usize,
    /// Style embedding extractor depth `m`; 0 bypasses the extractor.
    pub see_layers: usize,
    /// Number of common feature units `k`.
    pub units: usize,
    /// Lightweight transformer layers per pipeline.
    pub layers: usize,
    /// Hidden width of the lightweight feed-forward block; defaults to `d_e / 4`.
    pub ffn_dim: Option<usize>,
    pub attention_normalizer: AttentionNormalizer,
    pub gate_normalizer: GateNormalizer,
    /// Caps memory gates at 1 so the common-unit update is a convex blend.
    pub gate_clamp: bool,
    pub see_input: SeeInput,
    /// Disabling removes common-unit attention and the memory gate; the style
    /// embedding then drives feature adjustment directly.
    pub use_cko: bool,
    pub pair_pooling: PairPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokens: 36,
            d_in: 1024,
            d_in_text: None,
            d_e: 1024,
            see_layers: 4,
            units: 16,
            layers: 2,
            ffn_dim: None,
            attention_normalizer: AttentionNormalizer::Literal,
            gate_normalizer: GateNormalizer::Logistic,
            gate_clamp: true,
            see_input: SeeInput::Transformer,
            use_cko: true,
            pair_pooling: PairPooling::MaxMean,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests, the acceptance suite and the
    /// shipped example configs: n=8, d_in=16, d_e=32, m=4, k=4, two layers.
    pub fn toy() -> Self {
        ModelConfig {
            tokens: 8,
            d_in: 16,
            d_e: 32,
            see_layers: 4,
            units: 4,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    pub fn d_in_text(&self) -> usize {
        self.d_in_text.unwrap_or(self.d_in)
    }

    /// Style embedding width `d_m = d_e / m`, or `d_e` when the extractor is
    /// bypassed.
    pub fn d_m(&self) -> usize {
        if self.see_layers == 0 {
            self.d_e
        } else {
            self.d_e / self.see_layers
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(self.d_e / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokens", self.tokens),
            ("d_in", self.d_in),
            ("d_in_text", self.d_in_text()),
            ("d_e", self.d_e),
            ("units", self.units),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.see_layers > 0 && self.d_e % self.see_layers != 0 {
            return Err(Error::Config(format!(
                "see_layers {} does not divide d_e {}",
                self.see_layers, self.d_e
            )));
        }
        Ok(())
    }
}
