//! Adapter weights, parameter-efficient attachments and the training loops.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::Provenance;
use crate::data::{make_batches, Batch, BatchPlan};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::block::uniform_tensor;
use crate::model::{Block, Bottleneck, Embeddings, Head, LanguageModel, LoraFactors, ModelConfig, NamedTensors, TransformerModel};
use crate::surgery::SplitPlan;
use crate::tensor::{AdamW, AdamWConfig, Float, Gradients, Graph, LrSchedule, Tensor, Var};

/// Which adapter tensors train.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PeftMode {
    /// Every adapter tensor.
    Full,
    /// Low-rank factors on every adapter projection.
    Lora { rank: usize, alpha: f64 },
    /// Residual bottleneck modules after attention and after the MLP.
    Bottleneck { width: usize },
    /// Bias vectors and norm gains.
    Bitfit,
}

impl PeftMode {
    pub fn name(&self) -> &'static str {
        match self {
            PeftMode::Full => "full",
            PeftMode::Lora { .. } => "lora",
            PeftMode::Bottleneck { .. } => "bottleneck",
            PeftMode::Bitfit => "bitfit",
        }
    }

    /// Whether the tensor `name` trains under this mode.
    pub fn trains(&self, name: &str) -> bool {
        match self {
            PeftMode::Full => true,
            PeftMode::Lora { .. } => name.ends_with(".lora_a") || name.ends_with(".lora_b"),
            PeftMode::Bottleneck { .. } => name.contains(".adapter_attn.") || name.contains(".adapter_mlp."),
            PeftMode::Bitfit => name.ends_with(".bias") || name.ends_with(".gain"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub width: usize,
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        Self { width: 64 }
    }
}

/// The sandwich adapter `A1`, `A2` (Δ before tuning, Δ* after), optionally
/// with embeddings and head, plus the provenance of its base model.
#[derive(Clone, Debug)]
pub struct AdapterWeights<T> {
    pub plan: SplitPlan,
    /// Depth of the model the adapter was cut from.
    pub n_layers: usize,
    pub mode: PeftMode,
    pub bottom: Vec<Block<T>>,
    pub top: Vec<Block<T>>,
    pub embeddings: Option<Embeddings<T>>,
    pub head: Option<Head<T>>,
    pub provenance: Provenance,
}

impl<T: Float> AdapterWeights<T> {
    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.bottom.iter().chain(&self.top)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        self.bottom.iter_mut().chain(self.top.iter_mut())
    }

    /// Sets trainable flags from the PEFT mode.
    pub fn apply_mode_flags(&mut self) {
        let mode = self.mode;
        for (name, t) in self.named_tensors_mut() {
            t.set_requires_grad(mode.trains(&name));
        }
    }

    fn require_full(&self, what: &str) -> Result<()> {
        if self.mode != PeftMode::Full {
            return Err(Error::contract(format!(
                "cannot attach {what}: adapter already in {} mode",
                self.mode.name()
            )));
        }
        Ok(())
    }

    /// Adds `x·A·B·(alpha/r)` to every adapter projection. `A` is uniform in
    /// `±1/sqrt(in)`, `B` is zero, so the forward pass is unchanged.
    pub fn attach_lora(mut self, spec: LoraSpec, seed: u64) -> Result<Self> {
        self.require_full("LoRA")?;
        if spec.rank == 0 || !(spec.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA needs rank >= 1 and alpha > 0, got {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in self.blocks_mut() {
            for (_, lin) in b.linears_mut() {
                let (i, o) = (lin.in_dim(), lin.out_dim());
                lin.lora = Some(LoraFactors {
                    a: uniform_tensor(&mut rng, &[i, spec.rank], 1.0 / (i as f64).sqrt()),
                    b: Tensor::zeros(&[spec.rank, o]),
                    scale: spec.alpha / spec.rank as f64,
                });
            }
        }
        self.mode = PeftMode::Lora {
            rank: spec.rank,
            alpha: spec.alpha,
        };
        self.apply_mode_flags();
        Ok(self)
    }

    /// Inserts two zero-output bottleneck modules into every adapter block.
    pub fn attach_bottleneck(mut self, spec: BottleneckSpec, seed: u64) -> Result<Self> {
        self.require_full("bottleneck adapters")?;
        if spec.width == 0 {
            return Err(Error::Config("bottleneck width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in self.blocks_mut() {
            let d = b.ln1.gain.numel();
            b.adapter_attn = Some(Bottleneck::new(&mut rng, d, spec.width));
            b.adapter_mlp = Some(Bottleneck::new(&mut rng, d, spec.width));
        }
        self.mode = PeftMode::Bottleneck { width: spec.width };
        self.apply_mode_flags();
        Ok(self)
    }

    /// Freezes everything except bias vectors and norm gains.
    pub fn attach_bitfit(mut self) -> Result<Self> {
        self.require_full("BitFit")?;
        self.mode = PeftMode::Bitfit;
        self.apply_mode_flags();
        Ok(self)
    }

    /// Trainable tensors only, by absolute name.
    pub fn trainable_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    /// Absolute block index of the adapter's `j`-th block.
    pub fn block_index(&self, j: usize) -> usize {
        if j < self.bottom.len() {
            j
        } else {
            self.n_layers - self.top.len() + (j - self.bottom.len())
        }
    }
}

impl<T: Float> NamedTensors<T> for AdapterWeights<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embeddings {
            out.extend(e.named_tensors());
        }
        for (j, b) in self.blocks().enumerate() {
            out.extend(b.named_tensors(&TransformerModel::<T>::block_prefix(self.block_index(j))));
        }
        if let Some(h) = &self.head {
            out.extend(h.named_tensors());
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let idx: Vec<usize> = (0..self.bottom.len() + self.top.len()).map(|j| self.block_index(j)).collect();
        let mut out = Vec::new();
        if let Some(e) = &mut self.embeddings {
            out.extend(e.named_tensors_mut());
        }
        for (b, i) in self.bottom.iter_mut().chain(self.top.iter_mut()).zip(idx) {
            out.extend(b.named_tensors_mut(&TransformerModel::<T>::block_prefix(i)));
        }
        if let Some(h) = &mut self.head {
            out.extend(h.named_tensors_mut());
        }
        out
    }
}

/// Mean next-token cross-entropy of `model` on `batch`.
pub fn batch_loss<'a, T: Float, M: LanguageModel<T>>(g: &Graph<'a, T>, model: &'a M, batch: &Batch) -> Result<Var> {
    let logits = model.logits(g, &batch.inputs, batch.batch_size, batch.seq_len)?;
    g.cross_entropy(logits, &batch.targets)
}

/// Forward, backward and one AdamW update. Returns the loss before the update.
pub fn train_step<T, M>(model: &mut M, batch: &Batch, opt: &mut AdamW, lr: f64, step: usize) -> Result<f64>
where
    T: Float,
    M: LanguageModel<T> + NamedTensors<T>,
{
    let grads = {
        let g = Graph::new();
        let l = batch_loss(&g, &*model, batch)?;
        let loss = g.value(l).data()[0].f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(l)?;
        (loss, Gradients::collect(&g, model.named_tensors()))
    };
    opt.step(model.named_tensors_mut(), &grads.1, lr)?;
    Ok(grads.0)
}

/// Endless batches: epoch after epoch of [`make_batches`].
pub struct BatchStream<'t> {
    tokens: &'t [u32],
    plan: BatchPlan,
    epoch: u64,
    pending: std::vec::IntoIter<Batch>,
}

impl<'t> BatchStream<'t> {
    pub fn new(tokens: &'t [u32], plan: BatchPlan) -> Result<Self> {
        let first = make_batches(tokens, &plan, 0)?;
        if first.is_empty() {
            return Err(Error::contract(format!(
                "{} tokens do not fill one batch of {}×{}",
                tokens.len(),
                plan.batch_size,
                plan.seq_len
            )));
        }
        Ok(Self {
            tokens,
            plan,
            epoch: 0,
            pending: first.into_iter(),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            self.epoch += 1;
            self.pending = make_batches(self.tokens, &self.plan, self.epoch)
                .expect("corpus already produced a full epoch")
                .into_iter();
        }
    }
}

/// A fixed-length optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            seq_len: 64,
            lr: 1e-3,
            lr_min: 1e-4,
            warmup_steps: 20,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Runs `cfg.steps` updates and returns the per-step losses.
pub fn train<T, M>(model: &mut M, tokens: &[u32], cfg: &TrainConfig) -> Result<Vec<f64>>
where
    T: Float,
    M: LanguageModel<T> + NamedTensors<T>,
{
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if model.trainable_count() == 0 {
        return Err(Error::contract("model has no trainable tensors"));
    }
    let plan = BatchPlan {
        seq_len: cfg.seq_len,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let mut stream = BatchStream::new(tokens, plan)?;
    let schedule = LrSchedule::new(cfg.lr, cfg.lr_min, cfg.steps, cfg.warmup_steps)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = stream.next_batch();
        // Warmup starts at lr_max/warmup rather than zero.
        let lr = crate::tensor::cosine_lr(&schedule, step + usize::from(cfg.warmup_steps > 0))?;
        losses.push(train_step(model, &batch, &mut opt, lr, step)?);
    }
    Ok(losses)
}

/// Initializes a model from `seed` and trains every tensor on `tokens`.
pub fn pretrain(config: ModelConfig, seed: u64, tokens: &[u32], cfg: &TrainConfig) -> Result<(TransformerModel<f32>, Vec<f64>)> {
    let mut model = TransformerModel::<f32>::init(config, seed)?;
    let losses = train(&mut model, tokens, cfg)?;
    Ok((model, losses))
}

/// The five-point learning-rate sweep (`--lr-grid default` on the command
/// line). Sized for large pretrained models; the toy model wants more.
pub const SWEEP_LR_GRID: [f64; 5] = [2e-5, 5e-5, 1e-4, 2e-4, 3e-4];

/// Single learning rate used for the toy model unless a grid is given.
pub const TOY_LR: f64 = 1e-3;

/// Grid-searched fine-tuning: one run per learning rate from identical
/// weights and data order, best run by final validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: usize,
    pub lr_min: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![TOY_LR],
            epochs: 3,
            steps_per_epoch: 50,
            batch_size: 8,
            seq_len: 64,
            warmup_steps: 10,
            lr_min: 0.0,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// One line of the fine-tuning log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<M> {
    pub model: M,
    pub best_lr: f64,
    /// Final validation loss of every grid run, in grid order.
    pub final_val_loss: Vec<(f64, f64)>,
    pub log: Vec<EpochRecord>,
}

/// Tunes the trainable tensors of `model` on `train_tokens`, selecting the
/// learning rate by validation loss on `val_tokens`. Epoch 0 in the log is
/// the untrained model.
pub fn finetune<T, M>(model: &M, train_tokens: &[u32], val_tokens: &[u32], cfg: &FinetuneConfig) -> Result<FinetuneOutcome<M>>
where
    T: Float,
    M: LanguageModel<T> + NamedTensors<T> + Clone,
{
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    if train_tokens.is_empty() || val_tokens.is_empty() {
        return Err(Error::contract("fine-tuning needs non-empty train and validation data"));
    }
    let total = cfg.total_steps();
    let initial_val = perplexity(model, val_tokens, cfg.seq_len, cfg.batch_size)?;
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, M)> = None;
    let mut finals = Vec::new();
    for &lr in &cfg.lr_grid {
        log.push(EpochRecord {
            epoch: 0,
            split: "validation".into(),
            loss: initial_val.mean_nll(),
            perplexity: initial_val.perplexity,
            lr,
        });
        let mut run = model.clone();
        let mut val_loss = initial_val.mean_nll();
        if total > 0 {
            if run.trainable_count() == 0 {
                return Err(Error::contract("model has no trainable tensors"));
            }
            let plan = BatchPlan {
                seq_len: cfg.seq_len,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
            };
            let mut stream = BatchStream::new(train_tokens, plan)?;
            let schedule = LrSchedule::new(lr, cfg.lr_min.min(lr), total, cfg.warmup_steps)?;
            let mut opt = AdamW::new(cfg.adamw);
            let mut step = 0;
            for epoch in 1..=cfg.epochs {
                let mut sum = 0.0;
                for _ in 0..cfg.steps_per_epoch {
                    let batch = stream.next_batch();
                    let rate = crate::tensor::cosine_lr(&schedule, step + usize::from(cfg.warmup_steps > 0))?;
                    sum += train_step(&mut run, &batch, &mut opt, rate, step)?;
                    step += 1;
                }
                let train_loss = sum / cfg.steps_per_epoch.max(1) as f64;
                log.push(EpochRecord {
                    epoch,
                    split: "train".into(),
                    loss: train_loss,
                    perplexity: train_loss.exp(),
                    lr,
                });
                let val = perplexity(&run, val_tokens, cfg.seq_len, cfg.batch_size)?;
                val_loss = val.mean_nll();
                log.push(EpochRecord {
                    epoch,
                    split: "validation".into(),
                    loss: val_loss,
                    perplexity: val.perplexity,
                    lr,
                });
                log::info!("lr {lr:e} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
            }
        }
        finals.push((lr, val_loss));
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((lr, val_loss, run));
        }
    }
    let (best_lr, _, model) = best.expect("grid is non-empty");
    Ok(FinetuneOutcome {
        model,
        best_lr,
        final_val_loss: finals,
        log,
    })
}

/// Writes `records` as CSV with a header row.
pub fn write_csv<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
