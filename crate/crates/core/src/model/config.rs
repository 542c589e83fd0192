use serde::{Deserialize, Serialize};

use crate::encode::EncodingConfig;
use crate::error::{Error, Result};

/// Architecture hyperparameters of the joint embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqaTConfig {
    /// Joint embedding width.
    pub d: usize,
    /// Feed-forward width of the multimodal transformer.
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Question tokens `l`.
    pub question_len: usize,
    /// Video feature rows `t`.
    pub video_len: usize,
    /// Answer tokens `m`.
    pub answer_len: usize,
    pub d_q: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub backbone_ff: usize,
    /// Language-only variant: video input zeroed and masked out.
    pub qa_t: bool,
    pub init_seed: u64,
}

impl Default for VqaTConfig {
    fn default() -> Self {
        Self::paper(30_522)
    }
}

impl VqaTConfig {
    /// Full-size dimensions.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d: 512,
            d_h: 2048,
            layers: 2,
            heads: 8,
            dropout: 0.1,
            question_len: 20,
            video_len: 20,
            answer_len: 10,
            d_q: 768,
            d_a: 768,
            d_v: 1024,
            vocab_size,
            backbone_layers: 1,
            backbone_heads: 12,
            backbone_ff: 3072,
            qa_t: false,
            init_seed: 0,
        }
    }

    /// Tiny configuration used for finite-difference gradient checks.
    pub fn reduced() -> Self {
        Self {
            d: 8,
            d_h: 16,
            layers: 1,
            heads: 2,
            dropout: 0.1,
            question_len: 4,
            video_len: 3,
            answer_len: 3,
            d_q: 6,
            d_a: 6,
            d_v: 5,
            vocab_size: 12,
            backbone_layers: 1,
            backbone_heads: 2,
            backbone_ff: 8,
            qa_t: false,
            init_seed: 0,
        }
    }

    /// Small model that trains in seconds on one CPU core.
    pub fn desk(vocab_size: usize, d_v: usize) -> Self {
        Self {
            d: 32,
            d_h: 64,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            question_len: 12,
            video_len: 8,
            answer_len: 6,
            d_q: 32,
            d_a: 32,
            d_v,
            vocab_size,
            backbone_layers: 1,
            backbone_heads: 4,
            backbone_ff: 64,
            qa_t: false,
            init_seed: 0,
        }
    }

    pub fn encoding(&self, mlm: bool) -> EncodingConfig {
        EncodingConfig {
            question_len: self.question_len,
            video_len: self.video_len,
            answer_len: self.answer_len,
            mlm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation("model config", m));
        let sizes = [
            self.d,
            self.d_h,
            self.layers,
            self.heads,
            self.question_len,
            self.video_len,
            self.answer_len,
            self.d_q,
            self.d_a,
            self.d_v,
            self.backbone_heads,
            self.backbone_ff,
        ];
        if sizes.contains(&0) {
            return fail("all sizes must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return fail("d must be divisible by heads");
        }
        if !self.d_q.is_multiple_of(self.backbone_heads)
            || !self.d_a.is_multiple_of(self.backbone_heads)
        {
            return fail("backbone widths must be divisible by backbone_heads");
        }
        if self.vocab_size < 6 {
            return fail("vocabulary must hold the special tokens and at least one word");
        }
        if self.question_len < 2 || self.answer_len < 2 {
            return fail("text lengths must fit [CLS] and [SEP]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
