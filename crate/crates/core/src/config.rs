use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("lm width {width} != heads {heads} × head size {head_size}")]
    LmHeads { width: usize, heads: usize, head_size: usize },
    #[error("audio width {width} != heads {heads} × head size {head_size}")]
    AudioHeads { width: usize, heads: usize, head_size: usize },
    #[error("audio width {width} is not divisible by reduction factor {reduction}")]
    Reduction { width: usize, reduction: usize },
    #[error("audio head geometry ({audio_heads} heads × {audio_head_size}) does not fit lm geometry ({lm_heads} heads × {lm_head_size})")]
    HeadBridge { audio_heads: usize, audio_head_size: usize, lm_heads: usize, lm_head_size: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
}

/// Geometry of the fused language model and of the acoustic stream it reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm_width: usize,
    pub lm_heads: usize,
    pub lm_head_size: usize,
    pub lm_layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub audio_width: usize,
    pub audio_heads: usize,
    pub audio_head_size: usize,
    pub audio_layers: usize,
    pub audio_len: usize,
    /// Rows of the learnable prefix matrix.
    pub prefix_len: usize,
    /// Bottleneck reduction factor of the acoustic adapter.
    pub reduction: usize,
    /// One bottleneck adapter processes both keys and values.
    pub shared_kv_adapter: bool,
    /// The acoustic cross-attention branch exists at all.
    pub acoustic_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lm_width: 64,
            lm_heads: 4,
            lm_head_size: 16,
            lm_layers: 4,
            ffn_hidden: 128,
            vocab_size: crate::tokenizer::CharTokenizer::lm().vocab_size(),
            max_positions: 64,
            audio_width: 32,
            audio_heads: 2,
            audio_head_size: 16,
            audio_layers: 2,
            audio_len: 32,
            prefix_len: 10,
            reduction: 8,
            shared_kv_adapter: true,
            acoustic_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.lm_width, "lm_width"),
            (self.lm_layers, "lm_layers"),
            (self.audio_width, "audio_width"),
            (self.audio_len, "audio_len"),
            (self.prefix_len, "prefix_len"),
            (self.reduction, "reduction"),
            (self.vocab_size, "vocab_size"),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.lm_heads * self.lm_head_size != self.lm_width {
            return Err(ConfigError::LmHeads { width: self.lm_width, heads: self.lm_heads, head_size: self.lm_head_size });
        }
        if self.audio_heads * self.audio_head_size != self.audio_width {
            return Err(ConfigError::AudioHeads { width: self.audio_width, heads: self.audio_heads, head_size: self.audio_head_size });
        }
        if !self.audio_width.is_multiple_of(self.reduction) {
            return Err(ConfigError::Reduction { width: self.audio_width, reduction: self.reduction });
        }
        if self.audio_heads > self.lm_heads || self.audio_head_size > self.lm_head_size {
            return Err(ConfigError::HeadBridge {
                audio_heads: self.audio_heads,
                audio_head_size: self.audio_head_size,
                lm_heads: self.lm_heads,
                lm_head_size: self.lm_head_size,
            });
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.audio_width / self.reduction
    }

    /// Number of distinct bottleneck adapters per layer (0, 1 or 2).
    pub fn adapters_per_layer(&self) -> usize {
        match (self.acoustic_branch, self.shared_kv_adapter) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => 2,
        }
    }

    /// Closed-form count of trainable parameters:
    /// `layers · (prefix·width + adapters·2·audio_width²/r + 2)`.
    pub fn trainable_param_count(&self) -> usize {
        let per_adapter = 2 * self.audio_width * self.audio_width / self.reduction;
        self.lm_layers * (self.prefix_len * self.lm_width + self.adapters_per_layer() * per_adapter + 2)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (reduction, shared) = variant.adapter_shape();
        self.reduction = reduction;
        self.shared_kv_adapter = shared;
        self
    }

    /// 7B-class language model fused with a large acoustic encoder, as in the
    /// full-scale medium variant.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            lm_width: 4096,
            lm_heads: 32,
            lm_head_size: 128,
            lm_layers: 32,
            ffn_hidden: 11008,
            vocab_size: 32000,
            max_positions: 2048,
            audio_width: 1280,
            audio_heads: 20,
            audio_head_size: 64,
            audio_layers: 32,
            audio_len: 1500,
            prefix_len: 10,
            reduction: 16,
            shared_kv_adapter: true,
            acoustic_branch: true,
        }
        .with_variant(variant)
    }
}

/// The three adapter sizes: separate K/V adapters at r=8, shared at r=16 and r=32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Large,
    Medium,
    Small,
}

impl Variant {
    pub fn adapter_shape(self) -> (usize, bool) {
        match self {
            Variant::Large => (8, false),
            Variant::Medium => (16, true),
            Variant::Small => (32, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Large => "wl-l",
            Variant::Medium => "wl-m",
            Variant::Small => "wl-s",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wl-l" | "large" => Some(Variant::Large),
            "wl-m" | "medium" => Some(Variant::Medium),
            "wl-s" | "small" => Some(Variant::Small),
            _ => None,
        }
    }
}
