use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

/// Intent and slot classification heads. Both are
/// `Linear(hidden→width) → GELU → Linear(width→width) → GELU → Linear(width→labels)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_intents: usize,
    pub n_slot_tags: usize,
    #[serde(default = "default_head_width")]
    pub width: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

fn default_head_width() -> usize {
    256
}

fn default_true() -> bool {
    true
}

impl HeadConfig {
    pub fn new(n_intents: usize, n_slot_tags: usize) -> Self {
        HeadConfig { n_intents, n_slot_tags, width: 256, pooling: Pooling::Mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    /// MLM output projection shares the token embedding matrix.
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub heads: Option<HeadConfig>,
}

impl EncoderConfig {
    /// Tiny config used by gradient checks and unit tests.
    pub fn toy(n_layers: usize, hidden: usize, vocab_size: usize) -> Self {
        let n_heads = if hidden % 4 == 0 { 4 } else { 1 };
        EncoderConfig {
            n_layers,
            hidden,
            ffn_inner: 4 * hidden,
            n_heads,
            head_size: hidden / n_heads,
            dropout: 0.1,
            max_len: 64,
            vocab_size,
            tie_embeddings: true,
            heads: None,
        }
    }

    /// Named architecture presets. The large teacher shapes exist for
    /// configuration validation and parameter accounting only.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (n_layers, hidden, ffn_inner, n_heads, head_size, max_len) = match name {
            "teacher-700m" => (20, 1536, 6144, 16, 64, 1024),
            "teacher-2.3b" => (29, 2560, 10240, 32, 80, 512),
            "teacher-9.3b" => (46, 4096, 16384, 32, 128, 512),
            "student-170m" => (16, 1024, 3072, 16, 64, 512),
            "student-17m" => (4, 768, 1200, 12, 64, 512),
            "desk-teacher" => (4, 32, 128, 4, 8, 64),
            "desk-student" => (2, 32, 128, 4, 8, 64),
            "desk-assistant" => (3, 32, 128, 4, 8, 64),
            other => return Err(Error::config(format!("unknown encoder preset {other:?}"))),
        };
        let cfg = EncoderConfig {
            n_layers,
            hidden,
            ffn_inner,
            n_heads,
            head_size,
            dropout: 0.1,
            max_len,
            vocab_size,
            tie_embeddings: true,
            heads: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the concatenated attention heads. Usually equal to `hidden`,
    /// but the 700M teacher shape has 16×64 heads over a 1536-wide stream.
    pub fn attn_dim(&self) -> usize {
        self.n_heads * self.head_size
    }

    pub fn with_heads(mut self, heads: HeadConfig) -> Self {
        self.heads = Some(heads);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("ffn_inner", self.ffn_inner),
            ("n_heads", self.n_heads),
            ("head_size", self.head_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return Err(Error::config(format!("vocab_size {} leaves no room beyond the specials", self.vocab_size)));
        }
        if let Some(h) = &self.heads {
            if h.n_intents == 0 || h.n_slot_tags == 0 || h.width == 0 {
                return Err(Error::config("classification heads need positive label counts and width"));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, h, f, a, l) = (self.vocab_size, self.hidden, self.ffn_inner, self.attn_dim(), self.max_len);
        let per_layer = 4 * h + 3 * (h * a + a) + (a * h + h) + (h * f + f) + (f * h + h);
        let mut n = v * h + l * h + self.n_layers * per_layer + 2 * h + v;
        if !self.tie_embeddings {
            n += v * h;
        }
        if let Some(hc) = &self.heads {
            let w = hc.width;
            let head = |out: usize| h * w + w + w * w + w + w * out + out;
            n += head(hc.n_intents) + head(hc.n_slot_tags);
        }
        n
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("encoder config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EncoderConfig = toml::from_str(text).map_err(|e| Error::config(format!("encoder config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
