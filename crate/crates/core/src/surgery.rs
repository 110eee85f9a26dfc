//! Sandwich decomposition, emulator construction and plug-in.
//!
//! A [`SplitModel`] is `A1 ∘ middle ∘ A2` between shared embeddings and head.
//! On the owner's side `middle` is the original frozen stack; after
//! [`SplitModel::with_emulator`] it is a compressed stand-in. Adapter tensors
//! keep the absolute `blocks.{i}` names of the source model, emulator blocks
//! are named `emulator.{j}`, so the two can never be confused.

use serde::{Deserialize, Serialize};

use crate::artifact::{canonical_hash, Provenance};
use crate::error::{Error, Result};
use crate::model::{forward_stack, Block, Embeddings, Head, LanguageModel, ModelConfig, NamedTensors, TransformerModel};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::tuning::{AdapterWeights, PeftMode};

/// How many blocks go to each side of the sandwich.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_bottom: usize,
    pub n_top: usize,
    #[serde(default)]
    pub include_embeddings_in_adapter: bool,
    #[serde(default)]
    pub include_head_in_adapter: bool,
}

impl SplitPlan {
    pub fn sandwich(n_bottom: usize, n_top: usize) -> Self {
        Self {
            n_bottom,
            n_top,
            include_embeddings_in_adapter: false,
            include_head_in_adapter: false,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.n_bottom + self.n_top >= n_layers {
            return Err(Error::Plan(format!(
                "{}+{} adapter leaves no middle layers in a {n_layers}-layer model",
                self.n_bottom, self.n_top
            )));
        }
        Ok(())
    }

    /// Number of middle blocks for a model of this depth.
    pub fn middle_len(&self, n_layers: usize) -> usize {
        n_layers - self.n_bottom - self.n_top
    }

    /// Absolute indices of the adapter blocks, bottom first.
    pub fn adapter_indices(&self, n_layers: usize) -> Vec<usize> {
        (0..self.n_bottom).chain(n_layers - self.n_top..n_layers).collect()
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

impl std::fmt::Display for SplitPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}+{}", self.n_bottom, self.n_top)
    }
}

impl std::str::FromStr for SplitPlan {
    type Err = Error;

    /// Parses `"2+2"`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("split plan must look like `2+2`, got `{s}`")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer count `{x}` in split plan `{s}`")))
        };
        Ok(Self::sandwich(parse(a)?, parse(b)?))
    }
}

/// Retained middle-layer indices of a uniform layer drop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDropPlan {
    pub m: usize,
    pub k: usize,
    pub retained_indices: Vec<usize>,
}

/// Keeps `k` of `m` layers at stride `(m−1)/(k−1)`, rounding half away from
/// zero, so the first and last layer always survive.
pub fn uniform_layer_drop(m: usize, k: usize) -> Result<LayerDropPlan> {
    if k < 2 || k > m {
        return Err(Error::Plan(format!("layer drop needs 2 <= k <= m, got m={m}, k={k}")));
    }
    // round(j·(m−1)/(k−1)) in exact integer arithmetic: ties go up.
    let den = k - 1;
    let retained_indices = (0..k).map(|j| (2 * j * (m - 1) + den) / (2 * den)).collect();
    Ok(LayerDropPlan { m, k, retained_indices })
}

impl LayerDropPlan {
    pub fn validate(&self) -> Result<()> {
        let fresh = uniform_layer_drop(self.m, self.k)?;
        if fresh.retained_indices != self.retained_indices {
            return Err(Error::Plan(format!(
                "retained indices {:?} do not follow the uniform rule for m={}, k={}",
                self.retained_indices, self.m, self.k
            )));
        }
        Ok(())
    }
}

/// Compression applied to the frozen middle to obtain the emulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum EmulatorSpec {
    LayerDrop { plan: LayerDropPlan },
    MagnitudePrune { sparsity: f64 },
    Quantize { bits: u32 },
    /// Layer drop used as the starting point for distillation.
    Distilled { plan: LayerDropPlan, steps: usize },
}

impl EmulatorSpec {
    pub fn layer_drop(m: usize, k: usize) -> Result<Self> {
        Ok(EmulatorSpec::LayerDrop {
            plan: uniform_layer_drop(m, k)?,
        })
    }

    pub fn method(&self) -> &'static str {
        match self {
            EmulatorSpec::LayerDrop { .. } => "layer-drop",
            EmulatorSpec::MagnitudePrune { .. } => "magnitude-prune",
            EmulatorSpec::Quantize { .. } => "quantize",
            EmulatorSpec::Distilled { .. } => "distilled",
        }
    }

    pub fn validate(&self, middle_len: usize) -> Result<()> {
        match self {
            EmulatorSpec::LayerDrop { plan } | EmulatorSpec::Distilled { plan, .. } => {
                plan.validate()?;
                if plan.m != middle_len {
                    return Err(Error::Spec(format!(
                        "layer-drop plan is for m={} but the middle has {middle_len} layers",
                        plan.m
                    )));
                }
            }
            &EmulatorSpec::MagnitudePrune { sparsity } => {
                if !(0.0..1.0).contains(&sparsity) {
                    return Err(Error::Spec(format!("sparsity must be in [0, 1), got {sparsity}")));
                }
            }
            &EmulatorSpec::Quantize { bits } => {
                if !(2..=16).contains(&bits) {
                    return Err(Error::Spec(format!("quantization bits must be in 2..=16, got {bits}")));
                }
            }
        }
        Ok(())
    }

    /// Number of emulator blocks for a middle of `middle_len` layers.
    pub fn emulator_len(&self, middle_len: usize) -> usize {
        match self {
            EmulatorSpec::LayerDrop { plan } | EmulatorSpec::Distilled { plan, .. } => plan.k,
            _ => middle_len,
        }
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Zeroes the `⌊sparsity·n⌋` smallest-magnitude nonzero entries. Ties go to
/// the lower flat index. Returns the number of entries zeroed.
pub fn magnitude_prune<T: Float>(values: &mut [T], sparsity: f64) -> usize {
    let target = (sparsity * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] != T::zero()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n = target.min(order.len());
    for &i in &order[..n] {
        values[i] = T::zero();
    }
    n
}

/// Symmetric per-tensor quantize → dequantize round trip. Returns the scale
/// `max|w| / (2^(bits−1) − 1)`; an all-zero tensor is left as is.
pub fn quantize_dequantize<T: Float>(values: &mut [T], bits: u32) -> f64 {
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    if max == 0.0 {
        return 0.0;
    }
    for v in values.iter_mut() {
        let q = (v.f64() * qmax / max).round().clamp(-qmax, qmax);
        *v = T::of(q * max / qmax);
    }
    max / qmax
}

/// Where the middle blocks of a split came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Middle {
    Original,
    Emulator(EmulatorSpec),
}

/// `A1 ∘ middle ∘ A2` with frozen embeddings/head unless the plan moves them
/// into the adapter.
#[derive(Clone, Debug)]
pub struct SplitModel<T> {
    pub config: ModelConfig,
    pub adapter: AdapterWeights<T>,
    pub middle: Vec<Block<T>>,
    pub middle_source: Middle,
    /// Frozen embeddings; `None` when they belong to the adapter.
    pub frame_embeddings: Option<Embeddings<T>>,
    /// Frozen head; `None` when it belongs to the adapter.
    pub frame_head: Option<Head<T>>,
}

/// Decomposes `model` into adapter and frozen middle. Adapter tensors are
/// flagged trainable, everything else frozen.
pub fn split<T: Float>(model: &TransformerModel<T>, plan: SplitPlan) -> Result<SplitModel<T>> {
    let n = model.config.n_layers;
    plan.validate(n)?;
    if plan.n_bottom + plan.n_top == 0 {
        log::warn!("0+0 split: the adapter is empty and the whole stack is frozen");
    }
    let mut blocks = model.blocks.clone();
    let top: Vec<Block<T>> = blocks.split_off(n - plan.n_top);
    let middle: Vec<Block<T>> = blocks.split_off(plan.n_bottom);
    let bottom = blocks;
    let provenance = Provenance {
        base_model_hash: model.weights_hash(),
        split_plan_hash: plan.hash(),
        emulator_spec_hash: String::new(),
    };
    let (adapter_emb, frame_emb) = if plan.include_embeddings_in_adapter {
        (Some(model.embeddings.clone()), None)
    } else {
        (None, Some(model.embeddings.clone()))
    };
    let (adapter_head, frame_head) = if plan.include_head_in_adapter {
        (Some(model.head.clone()), None)
    } else {
        (None, Some(model.head.clone()))
    };
    let mut out = SplitModel {
        config: model.config.clone(),
        adapter: AdapterWeights {
            plan,
            n_layers: n,
            mode: PeftMode::Full,
            bottom,
            top,
            embeddings: adapter_emb,
            head: adapter_head,
            provenance,
        },
        middle,
        middle_source: Middle::Original,
        frame_embeddings: frame_emb,
        frame_head,
    };
    out.freeze_all_but_adapter();
    Ok(out)
}

impl<T: Float> SplitModel<T> {
    pub fn embeddings(&self) -> &Embeddings<T> {
        self.adapter
            .embeddings
            .as_ref()
            .or(self.frame_embeddings.as_ref())
            .expect("embeddings live in the adapter or the frame")
    }

    pub fn head(&self) -> &Head<T> {
        self.adapter
            .head
            .as_ref()
            .or(self.frame_head.as_ref())
            .expect("head lives in the adapter or the frame")
    }

    pub fn plan(&self) -> SplitPlan {
        self.adapter.plan
    }

    /// Name prefix of middle block `j`.
    pub fn middle_prefix(&self, j: usize) -> String {
        match self.middle_source {
            Middle::Original => TransformerModel::<T>::block_prefix(self.adapter.plan.n_bottom + j),
            Middle::Emulator(_) => format!("emulator.{j}"),
        }
    }

    /// Middle and frame frozen; adapter flags follow its PEFT mode.
    pub fn freeze_all_but_adapter(&mut self) {
        for b in &mut self.middle {
            b.set_trainable(false);
        }
        if let Some(e) = &mut self.frame_embeddings {
            for (_, t) in e.named_tensors_mut() {
                t.set_requires_grad(false);
            }
        }
        if let Some(h) = &mut self.frame_head {
            for (_, t) in h.named_tensors_mut() {
                t.set_requires_grad(false);
            }
        }
        self.adapter.apply_mode_flags();
    }

    /// Builds the emulator from the original middle and swaps it in.
    pub fn emulate(&self, spec: &EmulatorSpec) -> Result<SplitModel<T>> {
        let blocks = build_emulator(self, spec)?;
        self.with_emulator(blocks, spec.clone())
    }

    /// Replaces the original middle by emulator `blocks` (kept frozen).
    pub fn with_emulator(&self, blocks: Vec<Block<T>>, spec: EmulatorSpec) -> Result<SplitModel<T>> {
        if self.middle_source != Middle::Original {
            return Err(Error::contract("split already carries an emulator"));
        }
        spec.validate(self.middle.len())?;
        if blocks.len() != spec.emulator_len(self.middle.len()) {
            return Err(Error::Spec(format!(
                "{} emulator blocks given, spec needs {}",
                blocks.len(),
                spec.emulator_len(self.middle.len())
            )));
        }
        let mut adapter = self.adapter.clone();
        adapter.provenance.emulator_spec_hash = spec.hash();
        let mut out = SplitModel {
            config: self.config.clone(),
            adapter,
            middle: blocks,
            middle_source: Middle::Emulator(spec),
            frame_embeddings: self.frame_embeddings.clone(),
            frame_head: self.frame_head.clone(),
        };
        out.freeze_all_but_adapter();
        Ok(out)
    }

    /// Names of the middle tensors (`blocks.{i}` or `emulator.{j}`).
    pub fn middle_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (j, b) in self.middle.iter().enumerate() {
            out.extend(b.named_tensors(&self.middle_prefix(j)));
        }
        out
    }

    /// Frame tensors (frozen embeddings and head) by name.
    pub fn frame_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.frame_embeddings {
            out.extend(e.named_tensors());
        }
        if let Some(h) = &self.frame_head {
            out.extend(h.named_tensors());
        }
        out
    }
}

impl<T: Float> LanguageModel<T> for SplitModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits<'a>(&'a self, g: &Graph<'a, T>, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let segments: [&[Block<T>]; 3] = [&self.adapter.bottom, &self.middle, &self.adapter.top];
        let (_, logits) = forward_stack(g, &self.config, self.embeddings(), &segments, self.head(), ids, batch, seq)?;
        Ok(logits)
    }
}

impl<T: Float> NamedTensors<T> for SplitModel<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let n = self.config.n_layers;
        let nb = self.adapter.plan.n_bottom;
        let mut out = Vec::new();
        out.extend(self.embeddings().named_tensors());
        for (i, b) in self.adapter.bottom.iter().enumerate() {
            out.extend(b.named_tensors(&TransformerModel::<T>::block_prefix(i)));
        }
        out.extend(self.middle_named_tensors());
        for (i, b) in self.adapter.top.iter().enumerate() {
            out.extend(b.named_tensors(&TransformerModel::<T>::block_prefix(n - self.adapter.top.len() + i)));
        }
        out.extend(self.head().named_tensors());
        debug_assert!(nb == self.adapter.bottom.len());
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let n = self.config.n_layers;
        let n_top = self.adapter.top.len();
        let prefixes: Vec<String> = (0..self.middle.len()).map(|j| self.middle_prefix(j)).collect();
        let mut out = Vec::new();
        match (&mut self.adapter.embeddings, &mut self.frame_embeddings) {
            (Some(e), _) | (None, Some(e)) => out.extend(e.named_tensors_mut()),
            (None, None) => {}
        }
        for (i, b) in self.adapter.bottom.iter_mut().enumerate() {
            out.extend(b.named_tensors_mut(&TransformerModel::<T>::block_prefix(i)));
        }
        for (b, p) in self.middle.iter_mut().zip(&prefixes) {
            out.extend(b.named_tensors_mut(p));
        }
        for (i, b) in self.adapter.top.iter_mut().enumerate() {
            out.extend(b.named_tensors_mut(&TransformerModel::<T>::block_prefix(n - n_top + i)));
        }
        match (&mut self.adapter.head, &mut self.frame_head) {
            (Some(h), _) | (None, Some(h)) => out.extend(h.named_tensors_mut()),
            (None, None) => {}
        }
        out
    }
}

/// Builds the emulator blocks from the original middle of `split`. The
/// original middle is not modified; returned blocks are frozen.
pub fn build_emulator<T: Float>(split: &SplitModel<T>, spec: &EmulatorSpec) -> Result<Vec<Block<T>>> {
    if split.middle_source != Middle::Original {
        return Err(Error::contract("emulators are built from the original middle"));
    }
    spec.validate(split.middle.len())?;
    let mut blocks: Vec<Block<T>> = match spec {
        EmulatorSpec::LayerDrop { plan } | EmulatorSpec::Distilled { plan, .. } => {
            plan.retained_indices.iter().map(|&i| split.middle[i].clone()).collect()
        }
        &EmulatorSpec::MagnitudePrune { sparsity } => {
            let mut blocks = split.middle.clone();
            for b in &mut blocks {
                for (_, lin) in b.linears_mut() {
                    magnitude_prune(lin.weight.data_mut(), sparsity);
                }
            }
            blocks
        }
        &EmulatorSpec::Quantize { bits } => {
            let mut blocks = split.middle.clone();
            for b in &mut blocks {
                for (_, lin) in b.linears_mut() {
                    quantize_dequantize(lin.weight.data_mut(), bits);
                }
            }
            blocks
        }
    };
    for b in &mut blocks {
        b.set_trainable(false);
    }
    Ok(blocks)
}

/// Installs a tuned adapter into `model`: `M' = [A', E]`. The middle blocks
/// are untouched; provenance must name this exact base model and plan.
pub fn plug_in<T: Float>(model: &TransformerModel<T>, adapter: &AdapterWeights<T>) -> Result<TransformerModel<T>> {
    let base = model.weights_hash();
    if adapter.provenance.base_model_hash != base {
        return Err(Error::Integration(format!(
            "adapter was tuned against base model {} but this model is {}",
            short(&adapter.provenance.base_model_hash),
            short(&base)
        )));
    }
    if adapter.provenance.split_plan_hash != adapter.plan.hash() {
        return Err(Error::Integration("adapter split plan does not match its provenance".into()));
    }
    let n = model.config.n_layers;
    if adapter.n_layers != n {
        return Err(Error::Integration(format!(
            "adapter expects a {}-layer model, this one has {n}",
            adapter.n_layers
        )));
    }
    adapter.plan.validate(n)?;
    let mut out = model.clone();
    for (i, b) in adapter.plan.adapter_indices(n).into_iter().zip(adapter.blocks()) {
        let want = out.blocks[i].ln1.gain.numel();
        if b.ln1.gain.numel() != want {
            return Err(Error::Integration(format!("adapter block {i} has the wrong width")));
        }
        out.blocks[i] = b.clone();
    }
    if let Some(e) = &adapter.embeddings {
        out.embeddings = e.clone();
    }
    if let Some(h) = &adapter.head {
        out.head = h.clone();
    }
    Ok(out)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn tiny(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 16,
            ..ModelConfig::toy()
        }
    }

    /// Closed form by exhaustive search: the integer nearest to j·(m−1)/(k−1),
    /// the larger one on an exact tie. Uses rational comparisons only.
    fn brute_force(m: usize, k: usize) -> Vec<usize> {
        (0..k)
            .map(|j| {
                let (num, den) = ((j * (m - 1)) as i64, (k - 1) as i64);
                let mut best = 0usize;
                for i in 0..m {
                    // |i − num/den| compared as |i·den − num|.
                    let d_i = (i as i64 * den - num).abs();
                    let d_b = (best as i64 * den - num).abs();
                    if d_i < d_b || (d_i == d_b && i > best) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn layer_drop_examples() {
        assert_eq!(uniform_layer_drop(5, 2).unwrap().retained_indices, vec![0, 4]);
        assert_eq!(uniform_layer_drop(5, 5).unwrap().retained_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(uniform_layer_drop(6, 3).unwrap().retained_indices, vec![0, 3, 5]);
        assert_eq!(uniform_layer_drop(4, 2).unwrap().retained_indices, vec![0, 3]);
        let p = uniform_layer_drop(28, 18).unwrap();
        assert_eq!(p.retained_indices.len(), 18);
        assert_eq!((p.retained_indices[0], p.retained_indices[17]), (0, 27));
        assert!(matches!(uniform_layer_drop(5, 1), Err(Error::Plan(_))));
        assert!(matches!(uniform_layer_drop(5, 6), Err(Error::Plan(_))));
    }

    #[test]
    fn layer_drop_matches_brute_force_for_all_small_plans() {
        for m in 2..=24 {
            for k in 2..=m {
                let p = uniform_layer_drop(m, k).unwrap();
                assert_eq!(p.retained_indices, brute_force(m, k), "m={m} k={k}");
            }
        }
    }

    proptest! {
        #[test]
        fn layer_drop_plan_invariants(m in 2usize..=24, k_off in 0usize..23) {
            let k = 2 + k_off % (m - 1);
            let p = uniform_layer_drop(m, k).unwrap();
            let idx = &p.retained_indices;
            prop_assert_eq!(idx.len(), k);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(idx[k - 1], m - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (j, &i) in idx.iter().enumerate() {
                let exact = j as f64 * (m - 1) as f64 / (k - 1) as f64;
                prop_assert!((i as f64 - exact).abs() <= 0.5 + 1e-12);
            }
            let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1);
        }

        #[test]
        fn prune_introduces_exactly_floor_zeros(v in proptest::collection::vec(-5.0f64..5.0, 1..64), s in 0.0f64..0.99) {
            let mut w = v.clone();
            let nonzero = v.iter().filter(|&&x| x != 0.0).count();
            let zeroed = magnitude_prune(&mut w, s);
            let want = ((s * v.len() as f64).floor() as usize).min(nonzero);
            prop_assert_eq!(zeroed, want);
            let newly = v.iter().zip(&w).filter(|(a, b)| **a != 0.0 && **b == 0.0).count();
            prop_assert_eq!(newly, want);
            // Survivors are never smaller in magnitude than pruned entries.
            let min_kept = w.iter().filter(|x| **x != 0.0).fold(f64::INFINITY, |m, x| m.min(x.abs()));
            let max_cut = v.iter().zip(&w).filter(|(a, b)| **a != 0.0 && **b == 0.0).fold(0.0f64, |m, (a, _)| m.max(a.abs()));
            prop_assert!(max_cut <= min_kept);
        }

        #[test]
        fn quantize_error_is_within_half_a_step(v in proptest::collection::vec(-3.0f64..3.0, 1..64), bits in 2u32..=12) {
            let mut w = v.clone();
            let scale = quantize_dequantize(&mut w, bits);
            for (a, b) in v.iter().zip(&w) {
                prop_assert!((a - b).abs() <= scale / 2.0 + 1e-12);
                if *a == 0.0 {
                    prop_assert_eq!(*b, 0.0);
                }
            }
        }
    }

    #[test]
    fn prune_and_quantize_examples() {
        let mut w = vec![3.0f64, -1.0, 2.0, 0.5];
        assert_eq!(magnitude_prune(&mut w, 0.5), 2);
        assert_eq!(w, vec![3.0, 0.0, 2.0, 0.0]);

        let mut w = vec![1.0f64, -1.0, 1.0, 2.0];
        magnitude_prune(&mut w, 0.5);
        assert_eq!(w, vec![0.0, 0.0, 1.0, 2.0]);

        let mut q = vec![0.0f64, 0.5, -1.0];
        let scale = quantize_dequantize(&mut q, 8);
        assert_eq!(scale, 1.0 / 127.0);
        assert_eq!(q, vec![0.0, 64.0 / 127.0, -1.0]);
        assert!((q[1] - 0.503_937).abs() < 1e-6);

        let mut z = vec![0.0f64; 3];
        assert_eq!(quantize_dequantize(&mut z, 8), 0.0);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn split_bookkeeping() {
        let model = TransformerModel::<f64>::init(tiny(8), 1).unwrap();
        let s = split(&model, SplitPlan::sandwich(2, 2)).unwrap();
        assert_eq!(s.middle.len(), 4);
        for j in 0..4 {
            assert!(s.middle[j].bit_eq(&model.blocks[2 + j]));
            assert_eq!(s.middle_prefix(j), format!("blocks.{}", 2 + j));
        }
        assert_eq!(s.plan().adapter_indices(8), vec![0, 1, 6, 7]);
        for (name, t) in s.named_tensors() {
            let adapter = ["blocks.0.", "blocks.1.", "blocks.6.", "blocks.7."].iter().any(|p| name.starts_with(p));
            assert_eq!(t.requires_grad(), adapter, "{name}");
        }

        let whole = split(&model, SplitPlan::sandwich(0, 0)).unwrap();
        assert_eq!(whole.middle.len(), 8);
        assert_eq!(whole.adapter.trainable_count(), 0);

        assert!(matches!(split(&model, SplitPlan::sandwich(4, 4)), Err(Error::Plan(_))));
        let xl = ModelConfig::gpt2_xl();
        assert_eq!(SplitPlan::sandwich(2, 2).middle_len(xl.n_layers), 44);
        assert_eq!(uniform_layer_drop(44, 16).unwrap().retained_indices.len(), 16);
    }

    #[test]
    fn split_forward_is_bitwise_the_full_forward() {
        let model = TransformerModel::<f64>::init(tiny(5), 3).unwrap();
        let ids: Vec<u32> = (0..12).map(|i| (i * 7 % 20) as u32).collect();
        let full = model.forward_full(&ids, 2, 6).unwrap();
        for nb in 0..5 {
            for nt in 0..5 - nb {
                let s = split(&model, SplitPlan::sandwich(nb, nt)).unwrap();
                let g = Graph::new();
                let l = s.logits(&g, &ids, 2, 6).unwrap();
                assert!(g.value(l).data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn identity_layer_drop_reproduces_the_middle() {
        let model = TransformerModel::<f64>::init(tiny(8), 2).unwrap();
        let s = split(&model, SplitPlan::sandwich(2, 2)).unwrap();
        let e = s.emulate(&EmulatorSpec::layer_drop(4, 4).unwrap()).unwrap();
        assert_eq!(e.middle_prefix(0), "emulator.0");
        let ids: Vec<u32> = (0..8).collect();
        let a = model.forward_full(&ids, 1, 8).unwrap();
        let g = Graph::new();
        let b = g.value(e.logits(&g, &ids, 1, 8).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(e.middle.iter().all(|b| b.named_tensors("").iter().all(|(_, t)| !t.requires_grad())));
    }

    #[test]
    fn emulators_leave_the_original_middle_untouched() {
        let model = TransformerModel::<f64>::init(tiny(8), 4).unwrap();
        let s = split(&model, SplitPlan::sandwich(2, 2)).unwrap();
        let before = crate::model::weights_hash(s.middle_named_tensors());
        for spec in [
            EmulatorSpec::layer_drop(4, 2).unwrap(),
            EmulatorSpec::MagnitudePrune { sparsity: 0.5 },
            EmulatorSpec::Quantize { bits: 8 },
        ] {
            let e = build_emulator(&s, &spec).unwrap();
            assert_eq!(e.len(), spec.emulator_len(4));
        }
        assert_eq!(before, crate::model::weights_hash(s.middle_named_tensors()));
        let pruned = build_emulator(&s, &EmulatorSpec::MagnitudePrune { sparsity: 0.5 }).unwrap();
        let w = pruned[0].mlp_up.weight.data();
        assert_eq!(w.iter().filter(|x| **x == 0.0).count(), w.len() / 2);
        assert!(pruned[0].ln1.gain.data().iter().all(|&x| x == 1.0));
        assert!(matches!(
            build_emulator(&s, &EmulatorSpec::MagnitudePrune { sparsity: 1.0 }),
            Err(Error::Spec(_))
        ));
        assert!(matches!(build_emulator(&s, &EmulatorSpec::Quantize { bits: 1 }), Err(Error::Spec(_))));
        assert!(matches!(build_emulator(&s, &EmulatorSpec::layer_drop(5, 2).unwrap()), Err(Error::Spec(_))));
    }

    #[test]
    fn plug_in_round_trip_and_provenance() {
        let model = TransformerModel::<f64>::init(tiny(8), 5).unwrap();
        let s = split(&model, SplitPlan::sandwich(2, 2)).unwrap();
        let back = plug_in(&model, &s.adapter).unwrap();
        assert!(back.bit_eq(&model));

        let mut tuned = s.adapter.clone();
        tuned.top[1].mlp_down.bias.data_mut()[0] += 1.0;
        let plugged = plug_in(&model, &tuned).unwrap();
        for i in 2..6 {
            assert!(plugged.blocks[i].bit_eq(&model.blocks[i]));
        }
        assert!(!plugged.blocks[7].bit_eq(&model.blocks[7]));

        let other = TransformerModel::<f64>::init(tiny(8), 6).unwrap();
        assert!(matches!(plug_in(&other, &s.adapter), Err(Error::Integration(_))));
    }

    #[test]
    fn plan_parsing() {
        assert_eq!("2+2".parse::<SplitPlan>().unwrap(), SplitPlan::sandwich(2, 2));
        assert_eq!("0 + 4".parse::<SplitPlan>().unwrap(), SplitPlan::sandwich(0, 4));
        assert!("22".parse::<SplitPlan>().is_err());
    }
}
