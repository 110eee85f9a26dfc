//! Hidden-state distillation of a layer-dropped emulator toward the middle
//! it replaces.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchPlan};
use crate::error::{Error, Result};
use crate::model::{run_blocks, Block};
use crate::surgery::SplitModel;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Float, Gradients, Graph, LrSchedule, Tensor};
use crate::tuning::BatchStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            lr_min: 0.0,
            warmup_steps: 10,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// One line of the distillation log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub loss: f64,
}

/// `(1/N) Σ_i ‖student_i − teacher_i‖²` over the leading dimension.
pub fn distill_loss<T: Float>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    let g = Graph::new();
    let l = g.sample_mse(g.input(student.clone()), g.input(teacher.clone()))?;
    Ok(g.value(l).data()[0].f64())
}

/// Hidden states after `A1` and after the original middle for one batch,
/// each `[batch × seq·d]`.
fn teacher_pass<T: Float>(s: &SplitModel<T>, batch: &Batch) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let cfg = &s.config;
    let x = s.embeddings().forward(&g, cfg, &batch.inputs, batch.batch_size, batch.seq_len)?;
    let x = run_blocks(&g, cfg, &s.adapter.bottom, x, batch.batch_size, batch.seq_len)?;
    let y = run_blocks(&g, cfg, &s.middle, x, batch.batch_size, batch.seq_len)?;
    let shape = vec![batch.batch_size, batch.seq_len * cfg.d_model];
    Ok((
        Tensor::new(shape.clone(), g.value(x).into_data())?,
        Tensor::new(shape, g.value(y).into_data())?,
    ))
}

/// Trains `emulator` so that it maps `A1`'s hidden states onto the original
/// middle's output. Only the emulator changes; the returned blocks are frozen.
pub fn distill_emulator<T: Float>(
    split: &SplitModel<T>,
    emulator: Vec<Block<T>>,
    tokens: &[u32],
    cfg: &DistillConfig,
) -> Result<(Vec<Block<T>>, Vec<DistillRecord>)> {
    if split.middle_source != crate::surgery::Middle::Original {
        return Err(Error::contract("the teacher must be the original middle"));
    }
    let mut student = emulator;
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        for b in &mut student {
            b.set_trainable(true);
        }
        let plan = BatchPlan {
            seq_len: cfg.seq_len,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        };
        let mut stream = BatchStream::new(tokens, plan)?;
        let schedule = LrSchedule::new(cfg.lr, cfg.lr_min.min(cfg.lr), cfg.steps, cfg.warmup_steps)?;
        let mut opt = AdamW::new(cfg.adamw);
        let d = split.config.d_model;
        for step in 0..cfg.steps {
            let batch = stream.next_batch();
            let (x, target) = teacher_pass(split, &batch)?;
            let (loss, grads) = {
                let g = Graph::new();
                let rows = batch.batch_size * batch.seq_len;
                let xin = g.reshape(g.input(x), &[rows, d])?;
                let out = run_blocks(&g, &split.config, &student, xin, batch.batch_size, batch.seq_len)?;
                let out = g.reshape(out, &[batch.batch_size, batch.seq_len * d])?;
                let l = g.sample_mse(out, g.input(target))?;
                let loss = g.value(l).data()[0].f64();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                g.backward(l)?;
                let named = student.iter().enumerate().flat_map(|(j, b)| b.named_tensors(&format!("emulator.{j}")));
                (loss, Gradients::collect(&g, named))
            };
            let lr = cosine_lr(&schedule, step + usize::from(cfg.warmup_steps > 0))?;
            let params = student
                .iter_mut()
                .enumerate()
                .flat_map(|(j, b)| b.named_tensors_mut(&format!("emulator.{j}")));
            opt.step(params, &grads, lr)?;
            log.push(DistillRecord { step, loss });
            if step % 50 == 0 {
                log::info!("distill step {step}: loss {loss:.5}");
            }
        }
    }
    for b in &mut student {
        b.set_trainable(false);
    }
    Ok((student, log))
}

/// Distillation loss of `emulator` on one batch, without updating anything.
pub fn emulator_gap<T: Float>(split: &SplitModel<T>, emulator: &[Block<T>], batch: &Batch) -> Result<f64> {
    let (x, target) = teacher_pass(split, batch)?;
    let g = Graph::new();
    let d = split.config.d_model;
    let xin = g.reshape(g.input(x), &[batch.batch_size * batch.seq_len, d])?;
    let out = run_blocks(&g, &split.config, emulator, xin, batch.batch_size, batch.seq_len)?;
    let out = Tensor::new(vec![batch.batch_size, batch.seq_len * d], g.value(out).into_data())?;
    distill_loss(&out, &target)
}
