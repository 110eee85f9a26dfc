//! Pre-norm transformer block and its parameter-efficient attachments.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{Architecture, ModelConfig};
use crate::error::Result;
use crate::tensor::{Float, Graph, Tensor, Var};

pub(crate) fn normal_tensor<T: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

pub(crate) fn uniform_tensor<T: Float, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

/// Collects `(name, tensor)` pairs under a dotted prefix.
pub struct Visitor<'s, T> {
    pub out: Vec<(String, &'s Tensor<T>)>,
}

pub struct VisitorMut<'s, T> {
    pub out: Vec<(String, &'s mut Tensor<T>)>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Low-rank update `x·A·B·scale` added to a linear projection.
#[derive(Clone, Debug)]
pub struct LoraFactors<T> {
    /// `[in × r]`
    pub a: Tensor<T>,
    /// `[r × out]`, zero at attach time.
    pub b: Tensor<T>,
    pub scale: f64,
}

/// Affine projection `x·W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub lora: Option<LoraFactors<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.add_bias(g.matmul(x, w)?, b)?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let xa = g.matmul(x, g.param(&l.a))?;
                let delta = g.matmul(xa, g.param(&l.b))?;
                g.add(y, g.scale(delta, T::of(l.scale)))
            }
        }
    }

    fn visit<'s>(&'s self, prefix: &str, v: &mut Visitor<'s, T>) {
        v.out.push((join(prefix, "weight"), &self.weight));
        v.out.push((join(prefix, "bias"), &self.bias));
        if let Some(l) = &self.lora {
            v.out.push((join(prefix, "lora_a"), &l.a));
            v.out.push((join(prefix, "lora_b"), &l.b));
        }
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, v: &mut VisitorMut<'s, T>) {
        v.out.push((join(prefix, "weight"), &mut self.weight));
        v.out.push((join(prefix, "bias"), &mut self.bias));
        if let Some(l) = &mut self.lora {
            v.out.push((join(prefix, "lora_a"), &mut l.a));
            v.out.push((join(prefix, "lora_b"), &mut l.b));
        }
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Norm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, g.param(&self.gain), g.param(&self.bias), eps)
    }

    fn visit<'s>(&'s self, prefix: &str, v: &mut Visitor<'s, T>) {
        v.out.push((join(prefix, "gain"), &self.gain));
        v.out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, v: &mut VisitorMut<'s, T>) {
        v.out.push((join(prefix, "gain"), &mut self.gain));
        v.out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Residual bottleneck module `z + up(gelu(down(z)))`.
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    pub down: Linear<T>,
    pub up: Linear<T>,
}

impl<T: Float> Bottleneck<T> {
    /// Random down-projection, zero up-projection: identity at creation.
    pub fn new<R: Rng>(rng: &mut R, d: usize, width: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            down: Linear::new(uniform_tensor(rng, &[d, width], bound), Tensor::zeros(&[width])),
            up: Linear::new(Tensor::zeros(&[width, d]), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, z: Var) -> Result<Var> {
        let h = g.gelu(self.down.forward(g, z)?);
        g.add(z, self.up.forward(g, h)?)
    }

    fn visit<'s>(&'s self, prefix: &str, v: &mut Visitor<'s, T>) {
        self.down.visit(&join(prefix, "down"), v);
        self.up.visit(&join(prefix, "up"), v);
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, v: &mut VisitorMut<'s, T>) {
        self.down.visit_mut(&join(prefix, "down"), v);
        self.up.visit_mut(&join(prefix, "up"), v);
    }
}

#[derive(Clone, Debug)]
pub enum QkvProjection<T> {
    Fused(Linear<T>),
    Separate { q: Linear<T>, k: Linear<T>, v: Linear<T> },
}

/// Pre-norm attention + MLP block with residual connections.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub qkv: QkvProjection<T>,
    pub attn_out: Linear<T>,
    pub ln2: Norm<T>,
    pub mlp_up: Linear<T>,
    pub mlp_down: Linear<T>,
    pub adapter_attn: Option<Bottleneck<T>>,
    pub adapter_mlp: Option<Bottleneck<T>>,
}

impl<T: Float> Block<T> {
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
        let lin = |rng: &mut R, i: usize, o: usize, s: f64| Linear::new(normal_tensor(rng, &[i, o], s), Tensor::zeros(&[o]));
        let qkv = match cfg.architecture {
            Architecture::Gpt2Like => QkvProjection::Fused(lin(rng, d, 3 * d, std)),
            Architecture::OptLike => QkvProjection::Separate {
                q: lin(rng, d, d, std),
                k: lin(rng, d, d, std),
                v: lin(rng, d, d, std),
            },
        };
        let attn_out = lin(rng, d, d, resid_std);
        let mlp_up = lin(rng, d, cfg.d_ff, std);
        let mlp_down = lin(rng, cfg.d_ff, d, resid_std);
        Self {
            ln1: Norm::new(d),
            qkv,
            attn_out,
            ln2: Norm::new(d),
            mlp_up,
            mlp_down,
            adapter_attn: None,
            adapter_mlp: None,
        }
    }

    /// All-zero block with the config's shapes (norm gains zero as well).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let lin = |i: usize, o: usize| Linear::new(Tensor::zeros(&[i, o]), Tensor::zeros(&[o]));
        let norm = || Norm {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        };
        let qkv = match cfg.architecture {
            Architecture::Gpt2Like => QkvProjection::Fused(lin(d, 3 * d)),
            Architecture::OptLike => QkvProjection::Separate {
                q: lin(d, d),
                k: lin(d, d),
                v: lin(d, d),
            },
        };
        Self {
            ln1: norm(),
            qkv,
            attn_out: lin(d, d),
            ln2: norm(),
            mlp_up: lin(d, cfg.d_ff),
            mlp_down: lin(cfg.d_ff, d),
            adapter_attn: None,
            adapter_mlp: None,
        }
    }

    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, x: Var, batch: usize, seq: usize, cfg: &ModelConfig) -> Result<Var> {
        let d = cfg.d_model;
        let h = self.ln1.forward(g, x, cfg.layer_norm_eps)?;
        let (q, k, v) = match &self.qkv {
            QkvProjection::Fused(p) => {
                let qkv = p.forward(g, h)?;
                (g.slice_cols(qkv, 0, d)?, g.slice_cols(qkv, d, d)?, g.slice_cols(qkv, 2 * d, d)?)
            }
            QkvProjection::Separate { q, k, v } => (q.forward(g, h)?, k.forward(g, h)?, v.forward(g, h)?),
        };
        let a = g.attention(q, k, v, batch, seq, cfg.n_heads)?;
        let mut a = self.attn_out.forward(g, a)?;
        if let Some(ad) = &self.adapter_attn {
            a = ad.forward(g, a)?;
        }
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x, cfg.layer_norm_eps)?;
        let h = g.gelu(self.mlp_up.forward(g, h)?);
        let mut m = self.mlp_down.forward(g, h)?;
        if let Some(ad) = &self.adapter_mlp {
            m = ad.forward(g, m)?;
        }
        g.add(x, m)
    }

    /// All projections in forward order with their relative names.
    pub fn linears(&self) -> Vec<(&'static str, &Linear<T>)> {
        let mut out = Vec::new();
        match &self.qkv {
            QkvProjection::Fused(p) => out.push(("attn.qkv", p)),
            QkvProjection::Separate { q, k, v } => {
                out.push(("attn.q", q));
                out.push(("attn.k", k));
                out.push(("attn.v", v));
            }
        }
        out.push(("attn.out", &self.attn_out));
        out.push(("mlp.up", &self.mlp_up));
        out.push(("mlp.down", &self.mlp_down));
        out
    }

    pub fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear<T>)> {
        let mut out = Vec::new();
        match &mut self.qkv {
            QkvProjection::Fused(p) => out.push(("attn.qkv", p)),
            QkvProjection::Separate { q, k, v } => {
                out.push(("attn.q", q));
                out.push(("attn.k", k));
                out.push(("attn.v", v));
            }
        }
        out.push(("attn.out", &mut self.attn_out));
        out.push(("mlp.up", &mut self.mlp_up));
        out.push(("mlp.down", &mut self.mlp_down));
        out
    }

    pub fn visit<'s>(&'s self, prefix: &str, v: &mut Visitor<'s, T>) {
        self.ln1.visit(&join(prefix, "ln1"), v);
        match &self.qkv {
            QkvProjection::Fused(p) => p.visit(&join(prefix, "attn.qkv"), v),
            QkvProjection::Separate { q, k, v: vv } => {
                q.visit(&join(prefix, "attn.q"), v);
                k.visit(&join(prefix, "attn.k"), v);
                vv.visit(&join(prefix, "attn.v"), v);
            }
        }
        self.attn_out.visit(&join(prefix, "attn.out"), v);
        if let Some(ad) = &self.adapter_attn {
            ad.visit(&join(prefix, "adapter_attn"), v);
        }
        self.ln2.visit(&join(prefix, "ln2"), v);
        self.mlp_up.visit(&join(prefix, "mlp.up"), v);
        self.mlp_down.visit(&join(prefix, "mlp.down"), v);
        if let Some(ad) = &self.adapter_mlp {
            ad.visit(&join(prefix, "adapter_mlp"), v);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, v: &mut VisitorMut<'s, T>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), v);
        match &mut self.qkv {
            QkvProjection::Fused(p) => p.visit_mut(&join(prefix, "attn.qkv"), v),
            QkvProjection::Separate { q, k, v: vv } => {
                q.visit_mut(&join(prefix, "attn.q"), v);
                k.visit_mut(&join(prefix, "attn.k"), v);
                vv.visit_mut(&join(prefix, "attn.v"), v);
            }
        }
        self.attn_out.visit_mut(&join(prefix, "attn.out"), v);
        if let Some(ad) = &mut self.adapter_attn {
            ad.visit_mut(&join(prefix, "adapter_attn"), v);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), v);
        self.mlp_up.visit_mut(&join(prefix, "mlp.up"), v);
        self.mlp_down.visit_mut(&join(prefix, "mlp.down"), v);
        if let Some(ad) = &mut self.adapter_mlp {
            ad.visit_mut(&join(prefix, "adapter_mlp"), v);
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut v = Visitor { out: Vec::new() };
        self.visit(prefix, &mut v);
        v.out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = VisitorMut { out: Vec::new() };
        self.visit_mut(prefix, &mut v);
        v.out
    }

    /// Sets the trainable flag on every tensor of the block.
    pub fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_tensors_mut("") {
            t.set_requires_grad(flag);
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = self.named_tensors("");
        let b = other.named_tensors("");
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors("").iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> Block<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            lora: l.lora.as_ref().map(|f| LoraFactors {
                a: f.a.cast(),
                b: f.b.cast(),
                scale: f.scale,
            }),
        };
        let norm = |n: &Norm<T>| Norm {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
        };
        let bott = |b: &Bottleneck<T>| Bottleneck {
            down: lin(&b.down),
            up: lin(&b.up),
        };
        Block {
            ln1: norm(&self.ln1),
            qkv: match &self.qkv {
                QkvProjection::Fused(p) => QkvProjection::Fused(lin(p)),
                QkvProjection::Separate { q, k, v } => QkvProjection::Separate {
                    q: lin(q),
                    k: lin(k),
                    v: lin(v),
                },
            },
            attn_out: lin(&self.attn_out),
            ln2: norm(&self.ln2),
            mlp_up: lin(&self.mlp_up),
            mlp_down: lin(&self.mlp_down),
            adapter_attn: self.adapter_attn.as_ref().map(bott),
            adapter_mlp: self.adapter_mlp.as_ref().map(bott),
        }
    }
}
