use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection layout of the attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// One fused `d → 3d` qkv projection.
    Gpt2Like,
    /// Separate q, k, v projections.
    OptLike,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gpt2Like => "gpt2-like",
            Architecture::OptLike => "opt-like",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt2-like" => Ok(Architecture::Gpt2Like),
            "opt-like" => Ok(Architecture::OptLike),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// 8 layers, d=128, 4 heads, byte vocabulary. Trains in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            architecture: Architecture::Gpt2Like,
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            max_seq_len: 256,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn gpt2_xl() -> Self {
        Self {
            architecture: Architecture::Gpt2Like,
            n_layers: 48,
            d_model: 1600,
            n_heads: 25,
            d_ff: 6400,
            vocab_size: 50257,
            max_seq_len: 1024,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn opt_1_3b() -> Self {
        Self {
            architecture: Architecture::OptLike,
            n_layers: 24,
            d_model: 2048,
            n_heads: 32,
            d_ff: 8192,
            vocab_size: 50272,
            max_seq_len: 2048,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "gpt2-xl" => Ok(Self::gpt2_xl()),
            "opt-1.3b" => Ok(Self::opt_1_3b()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected toy, gpt2-xl or opt-1.3b)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}
