use serde::{Deserialize, Serialize};

use crate::grouping::GroupingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    /// Trainable lookup table.
    Learned,
    /// Fixed identity rows (requires `vocab <= d_model / byte_group`).
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Per-head query/key width.
    pub d_head: usize,
    pub context_len: usize,
    pub ngram: usize,
    pub byte_group: usize,
    pub dropout: f64,
    /// Sinusoid base of the positional encoding.
    pub pos_base: f64,
    pub embed_mode: EmbedMode,
    pub conv_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Carry the encoder output as memory. When off, the previous
    /// segment's encoder input is carried instead.
    pub latent_array: bool,
    /// Number of past segments kept as memory; 1 cuts memory to the
    /// current segment length, 0 disables recurrence.
    pub memory_segments: usize,
    pub init_seed: u64,
}

/// Conv/pool sizes that turn `positions` encoder inputs into a short
/// feature sequence; 64 positions give the 41 -> 13 layout.
pub fn default_feature_shape(positions: usize) -> (usize, usize, usize) {
    let conv_kernel = ((3 * positions + 4) / 8).max(1).min(positions.max(1));
    let conv_out = positions + 1 - conv_kernel;
    let pool = conv_out.min(3);
    (conv_kernel, pool, pool)
}

impl ModelConfig {
    /// Full-width configuration: 768-wide encoder, 3072-wide feed-forward,
    /// one base per token, no byte-grouping.
    pub fn full() -> Self {
        let mut c = ModelConfig::for_grouping(768, 3072, 8, &GroupingConfig::aligned(213_000, 64, 1, 1));
        c.init_seed = 0;
        c
    }

    /// Desk-scale configuration used by tests and the `--toy` preset.
    pub fn toy(grouping: &GroupingConfig) -> Self {
        ModelConfig::for_grouping(64, 256, 4, grouping)
    }

    pub fn for_grouping(d_model: usize, d_ff: usize, n_heads: usize, grouping: &GroupingConfig) -> Self {
        let positions = grouping.positions();
        let (conv_kernel, pool_kernel, pool_stride) = default_feature_shape(positions);
        ModelConfig {
            d_model,
            d_ff,
            n_heads,
            d_head: d_model / n_heads.max(1),
            context_len: grouping.context_len,
            ngram: grouping.ngram,
            byte_group: grouping.byte_group,
            dropout: 0.1,
            pos_base: 10_000.0,
            embed_mode: EmbedMode::Learned,
            conv_kernel,
            pool_kernel,
            pool_stride,
            latent_array: true,
            memory_segments: 1,
            init_seed: 0x5EED,
        }
    }

    pub fn vocab(&self) -> usize {
        4usize.pow(self.ngram as u32)
    }

    pub fn tokens(&self) -> usize {
        self.context_len / self.ngram
    }

    pub fn embed_width(&self) -> usize {
        self.d_model / self.byte_group
    }

    /// Encoder inputs per window after byte-grouping.
    pub fn positions(&self) -> usize {
        self.tokens() / self.byte_group
    }

    pub fn conv_out_len(&self) -> usize {
        self.positions() + 1 - self.conv_kernel
    }

    /// Segment length N fed to the encoder.
    pub fn segment_len(&self) -> usize {
        (self.conv_out_len() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Rows of carried memory M.
    pub fn memory_len(&self) -> usize {
        self.memory_segments * self.segment_len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head == 0 {
            return Err("d_head must be positive".into());
        }
        if self.ngram == 0 || self.ngram > GroupingConfig::MAX_NGRAM {
            return Err(format!("ngram {} out of range", self.ngram));
        }
        if self.byte_group == 0 || !self.d_model.is_multiple_of(self.byte_group) {
            return Err(format!(
                "d_model {} not divisible by byte_group {}",
                self.d_model, self.byte_group
            ));
        }
        if !self.context_len.is_multiple_of(self.ngram * self.byte_group) || self.positions() == 0 {
            return Err(format!(
                "context {} not a positive multiple of ngram*byte_group",
                self.context_len
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel > self.positions() {
            return Err(format!(
                "conv kernel {} vs {} positions",
                self.conv_kernel,
                self.positions()
            ));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 || self.pool_kernel > self.conv_out_len() {
            return Err(format!(
                "pool {} vs conv output {}",
                self.pool_kernel,
                self.conv_out_len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.embed_mode == EmbedMode::OneHot && self.vocab() > self.embed_width() {
            return Err(format!(
                "one-hot embedding needs vocab {} <= embedding width {}",
                self.vocab(),
                self.embed_width()
            ));
        }
        Ok(())
    }

    pub fn matches_grouping(&self, g: &GroupingConfig) -> bool {
        self.context_len == g.context_len && self.ngram == g.ngram && self.byte_group == g.byte_group
    }

    pub fn grouping(&self, group_len: usize) -> GroupingConfig {
        GroupingConfig {
            group_len,
            context_len: self.context_len,
            ngram: self.ngram,
            byte_group: self.byte_group,
        }
    }
}
