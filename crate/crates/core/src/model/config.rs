use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a Multiway Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiwayConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub num_heads: usize,
    /// Number of top layers that carry a vision-language expert.
    pub vl_expert_layers: usize,
    /// Square input resolution in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    /// Maximum text length, including the CLS and SEP tokens.
    pub max_seq: usize,
    /// Stochastic depth rate reached at the top layer.
    pub drop_path_rate: f64,
}

impl MultiwayConfig {
    /// 40 layers, hidden 1408, FFN 6144, 16 heads, VL experts in the top 3
    /// layers, 14×14 patches at 224², 64k text vocab, 8192 visual tokens.
    pub fn giant() -> Self {
        Self {
            num_layers: 40,
            hidden: 1408,
            ffn_inner: 6144,
            num_heads: 16,
            vl_expert_layers: 3,
            image_size: 224,
            patch_size: 14,
            channels: 3,
            text_vocab: 64_000,
            visual_vocab: 8192,
            max_seq: 64,
            drop_path_rate: 0.1,
        }
    }

    /// Desk-scale profile used by tests and the shipped toy config.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            ffn_inner: 128,
            num_heads: 4,
            vl_expert_layers: 1,
            image_size: 24,
            patch_size: 4,
            channels: 3,
            text_vocab: 600,
            visual_vocab: 64,
            max_seq: 32,
            drop_path_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("ffn_inner", self.ffn_inner),
            ("num_heads", self.num_heads),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("text_vocab", self.text_vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.vl_expert_layers > self.num_layers {
            return Err(Error::Config(format!(
                "vl_expert_layers {} exceeds num_layers {}",
                self.vl_expert_layers, self.num_layers
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.visual_vocab < 2 {
            return Err(Error::Config("visual_vocab must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// 1-based index of the lowest layer that owns a vision-language expert.
    pub fn first_vl_layer(&self) -> usize {
        self.num_layers - self.vl_expert_layers + 1
    }

    pub fn has_vl_expert(&self, layer: usize) -> bool {
        self.vl_expert_layers > 0 && layer >= self.first_vl_layer() && layer <= self.num_layers
    }

    /// Stochastic depth probability at 1-based `layer`: linear ramp to `drop_path_rate`.
    pub fn drop_prob(&self, layer: usize) -> f64 {
        self.drop_path_rate * layer as f64 / self.num_layers as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityTag {
    Vision,
    Language,
}

/// Feed-forward expert selected for a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expert {
    Vision,
    Language,
    VisionLanguage,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Vision, Expert::Language, Expert::VisionLanguage];

    pub fn key(self) -> &'static str {
        match self {
            Expert::Vision => "v",
            Expert::Language => "l",
            Expert::VisionLanguage => "vl",
        }
    }
}

/// How the shared backbone is wired for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    VisionEncoder,
    LanguageEncoder,
    Fusion,
    Dual,
    Seq2Seq,
}

impl Layout {
    /// Layouts whose top layers send every token to the vision-language expert.
    pub fn uses_vl_experts(self) -> bool {
        matches!(self, Layout::Fusion | Layout::Seq2Seq)
    }
}
