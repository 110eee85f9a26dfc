//! Decoder-only transformer language model with taps between block segments.

pub mod block;
pub mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use block::{Block, Bottleneck, Linear, LoraFactors, Norm, QkvProjection};
pub use config::{Architecture, ModelConfig};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Token and learned absolute position tables.
#[derive(Clone, Debug)]
pub struct Embeddings<T> {
    pub token: Tensor<T>,
    pub position: Tensor<T>,
}

impl<T: Float> Embeddings<T> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("embed.token".to_string(), &self.token),
            ("embed.position".to_string(), &self.position),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("embed.token".to_string(), &mut self.token),
            ("embed.position".to_string(), &mut self.position),
        ]
    }

    /// Summed token + position embeddings, `[batch·seq × d]`.
    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, cfg: &ModelConfig, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        if seq == 0 || batch == 0 {
            return Err(Error::contract("empty batch"));
        }
        if seq > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if ids.len() != batch * seq {
            return Err(Error::Dimension {
                op: "embed",
                lhs: vec![ids.len()],
                rhs: vec![batch, seq],
            });
        }
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let tok = g.embedding(g.param(&self.token), ids)?;
        let pos = g.embedding(g.param(&self.position), &positions)?;
        g.add(tok, pos)
    }
}

/// Final norm and LM projection (tied to the token table when `proj` is `None`).
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub norm: Norm<T>,
    pub proj: Option<Tensor<T>>,
}

impl<T: Float> Head<T> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("head.norm.gain".to_string(), &self.norm.gain),
            ("head.norm.bias".to_string(), &self.norm.bias),
        ];
        if let Some(p) = &self.proj {
            out.push(("head.proj".to_string(), p));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("head.norm.gain".to_string(), &mut self.norm.gain),
            ("head.norm.bias".to_string(), &mut self.norm.bias),
        ];
        if let Some(p) = &mut self.proj {
            out.push(("head.proj".to_string(), p));
        }
        out
    }

    /// Logits `[batch·seq × vocab]`.
    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, cfg: &ModelConfig, emb: &'a Embeddings<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x, cfg.layer_norm_eps)?;
        let w = match &self.proj {
            Some(p) => g.param(p),
            None => g.transpose(g.param(&emb.token))?,
        };
        g.matmul(h, w)
    }
}

/// Anything that maps token ids to next-token logits.
pub trait LanguageModel<T: Float>: Sync {
    fn config(&self) -> &ModelConfig;

    /// Logits `[batch·seq × vocab]` for row-major `ids` of shape `[batch × seq]`.
    fn logits<'a>(&'a self, g: &Graph<'a, T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var>;
}

/// Name → tensor access used by the optimizer, hashing and serialization.
pub trait NamedTensors<T: Float> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn trainable_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads, in name order.
    fn weights_hash(&self) -> String {
        weights_hash(self.named_tensors())
    }
}

pub fn weights_hash<'t, T: Float + 't>(tensors: impl IntoIterator<Item = (String, &'t Tensor<T>)>) -> String {
    let mut items: Vec<(String, &Tensor<T>)> = tensors.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs embeddings, each block segment in turn, then the head. Returns the
/// hidden state after every segment and the logits.
#[allow(clippy::too_many_arguments)]
pub fn forward_stack<'a, T: Float>(
    g: &Graph<'a, T>,
    cfg: &ModelConfig,
    emb: &'a Embeddings<T>,
    segments: &[&'a [Block<T>]],
    head: &'a Head<T>,
    ids: &[u32],
    batch: usize,
    seq: usize,
) -> Result<(Vec<Var>, Var)> {
    let mut x = emb.forward(g, cfg, ids, batch, seq)?;
    let mut taps = Vec::with_capacity(segments.len());
    for seg in segments {
        x = run_blocks(g, cfg, seg, x, batch, seq)?;
        taps.push(x);
    }
    let logits = head.forward(g, cfg, emb, x)?;
    Ok((taps, logits))
}

pub fn run_blocks<'a, T: Float>(
    g: &Graph<'a, T>,
    cfg: &ModelConfig,
    blocks: &'a [Block<T>],
    mut x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, batch, seq, cfg)?;
    }
    Ok(x)
}

/// Hidden states after A1, after the middle, and the logits of a three-way
/// segmented forward pass.
#[derive(Clone, Debug)]
pub struct SegmentedOutput<T> {
    pub hidden_after_a1: Tensor<T>,
    pub hidden_after_middle: Tensor<T>,
    /// `[batch × seq × vocab]`
    pub logits: Tensor<T>,
}

/// Evaluates `A1 ∘ middle ∘ A2` between shared embeddings and head.
#[allow(clippy::too_many_arguments)]
pub fn forward_segmented<T: Float>(
    cfg: &ModelConfig,
    emb: &Embeddings<T>,
    a1: &[Block<T>],
    middle: &[Block<T>],
    a2: &[Block<T>],
    head: &Head<T>,
    ids: &[u32],
    batch: usize,
    seq: usize,
) -> Result<SegmentedOutput<T>> {
    for b in a1.iter().chain(middle).chain(a2) {
        if b.ln1.gain.numel() != cfg.d_model {
            return Err(Error::Dimension {
                op: "forward_segmented",
                lhs: vec![b.ln1.gain.numel()],
                rhs: vec![cfg.d_model],
            });
        }
    }
    let g = Graph::new();
    let (taps, logits) = forward_stack(&g, cfg, emb, &[a1, middle, a2], head, ids, batch, seq)?;
    Ok(SegmentedOutput {
        hidden_after_a1: g.value(taps[0]),
        hidden_after_middle: g.value(taps[1]),
        logits: reshape_logits(g.value(logits), batch, seq)?,
    })
}

fn reshape_logits<T: Float>(t: Tensor<T>, batch: usize, seq: usize) -> Result<Tensor<T>> {
    let vocab = t.shape()[t.rank() - 1];
    Tensor::new(vec![batch, seq, vocab], t.into_data())
}

/// The foundation model: embeddings, an ordered block stack, and the head.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub embeddings: Embeddings<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
}

impl<T: Float> TransformerModel<T> {
    /// Seeded initialization. Projections are `N(0, 0.02)` with residual
    /// outputs scaled by `1/sqrt(2·n_layers)`; token embeddings `N(0, 0.02)`,
    /// position embeddings `N(0, 0.01)`; biases zero, norm gains one.
    /// Every tensor starts trainable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embeddings = Embeddings {
            token: block::normal_tensor(&mut rng, &[config.vocab_size, d], 0.02),
            position: block::normal_tensor(&mut rng, &[config.max_seq_len, d], 0.01),
        };
        let blocks = (0..config.n_layers).map(|_| Block::init(&mut rng, &config)).collect();
        let head = Head {
            norm: Norm::new(d),
            proj: (!config.tie_embeddings).then(|| block::normal_tensor(&mut rng, &[d, config.vocab_size], 0.02)),
        };
        let mut model = Self {
            config,
            embeddings,
            blocks,
            head,
        };
        model.set_all_trainable(true);
        Ok(model)
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Full fine-tuning setup: blocks and final norm train, embedding tables
    /// (and a tied head) stay frozen.
    pub fn set_finetune_trainable(&mut self) {
        for (name, t) in self.named_tensors_mut() {
            t.set_requires_grad(!name.starts_with("embed."));
        }
    }

    /// Logits `[batch × seq × vocab]`.
    pub fn forward_full(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let g = Graph::new();
        let logits = self.logits(&g, ids, batch, seq)?;
        reshape_logits(g.value(logits), batch, seq)
    }

    pub fn block_prefix(index: usize) -> String {
        format!("blocks.{index}")
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        self.config == other.config
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn cast<U: Float>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            embeddings: Embeddings {
                token: self.embeddings.token.cast(),
                position: self.embeddings.position.cast(),
            },
            blocks: self.blocks.iter().map(Block::cast).collect(),
            head: Head {
                norm: Norm {
                    gain: self.head.norm.gain.cast(),
                    bias: self.head.norm.bias.cast(),
                },
                proj: self.head.proj.as_ref().map(Tensor::cast),
            },
        }
    }
}

impl<T: Float> LanguageModel<T> for TransformerModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits<'a>(&'a self, g: &Graph<'a, T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let (_, logits) = forward_stack(g, &self.config, &self.embeddings, &[&self.blocks], &self.head, ids, batch, seq)?;
        Ok(logits)
    }
}

impl<T: Float> NamedTensors<T> for TransformerModel<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.embeddings.named_tensors();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors(&Self::block_prefix(i)));
        }
        out.extend(self.head.named_tensors());
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.embeddings.named_tensors_mut();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_tensors_mut(&Self::block_prefix(i)));
        }
        out.extend(self.head.named_tensors_mut());
        out
    }
}
