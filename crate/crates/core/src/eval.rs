//! Perplexity, the four metrics and the ablation grids.

use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::canonical_hash;
use crate::data::CorpusSplit;
use crate::distill::{distill_emulator, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, NamedTensors, TransformerModel};
use crate::surgery::{plug_in, split, EmulatorSpec, SplitModel, SplitPlan};
use crate::tensor::{kernels, Float, Graph};
use crate::tuning::{finetune, write_csv, FinetuneConfig};

/// Summed next-token NLL over a token stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub total_nll: f64,
    pub tokens: usize,
    pub perplexity: f64,
}

impl PplReport {
    pub fn mean_nll(&self) -> f64 {
        self.total_nll / self.tokens as f64
    }
}

/// Per-window NLL sums in window order.
fn window_nll<T: Float, M: LanguageModel<T> + ?Sized>(model: &M, tokens: &[u32], starts: &[usize], len: usize) -> Result<f64> {
    let mut ids = Vec::with_capacity(starts.len() * len);
    let mut targets = Vec::with_capacity(starts.len() * len);
    for &s in starts {
        ids.extend_from_slice(&tokens[s..s + len]);
        targets.extend_from_slice(&tokens[s + 1..s + len + 1]);
    }
    let g = Graph::new();
    let logits = model.logits(&g, &ids, starts.len(), len)?;
    let vocab = model.config().vocab_size;
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Index {
            what: "target id",
            index: bad as usize,
            bound: vocab,
        });
    }
    let values = g.value(logits);
    let (nll, _) = kernels::softmax_xent(values.data(), &targets, vocab);
    let mut total = 0.0;
    for v in nll {
        total += v;
    }
    Ok(total)
}

/// `exp(total NLL / predicted tokens)` over non-overlapping windows of
/// `seq_len` tokens; the last window may be shorter. Every token after the
/// first is predicted exactly once, with context back to its window start.
pub fn perplexity<T: Float, M: LanguageModel<T> + ?Sized>(model: &M, tokens: &[u32], seq_len: usize, batch_size: usize) -> Result<PplReport> {
    if tokens.len() < 2 {
        return Err(Error::contract("perplexity needs at least two tokens"));
    }
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::contract("seq_len and batch_size must be positive"));
    }
    let predicted = tokens.len() - 1;
    let full = predicted / seq_len;
    let tail = predicted % seq_len;
    let starts: Vec<usize> = (0..full).map(|w| w * seq_len).collect();
    let chunks: Vec<&[usize]> = starts.chunks(batch_size).collect();
    #[cfg(feature = "parallel")]
    let sums: Vec<Result<f64>> = chunks.par_iter().map(|c| window_nll(model, tokens, c, seq_len)).collect();
    #[cfg(not(feature = "parallel"))]
    let sums: Vec<Result<f64>> = chunks.iter().map(|c| window_nll(model, tokens, c, seq_len)).collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    if tail > 0 {
        total += window_nll(model, tokens, &[full * seq_len], tail)?;
    }
    Ok(PplReport {
        total_nll: total,
        tokens: predicted,
        perplexity: (total / predicted as f64).exp(),
    })
}

/// The four metrics of one pipeline run. A failed stage leaves the later
/// fields empty and records the error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub config_fingerprint: String,
    pub zero_shot_ppl: Option<f64>,
    pub emulator_ppl: Option<f64>,
    pub plug_in_ppl: Option<f64>,
    pub full_ft_ppl: Option<f64>,
    pub emulator_best_lr: Option<f64>,
    pub full_ft_best_lr: Option<f64>,
    pub failure: Option<String>,
}

impl MetricsRecord {
    /// All four perplexities finite and at least one.
    pub fn is_complete(&self) -> bool {
        [self.zero_shot_ppl, self.emulator_ppl, self.plug_in_ppl, self.full_ft_ppl]
            .iter()
            .all(|p| matches!(p, Some(v) if v.is_finite() && *v >= 1.0))
    }
}

/// Inputs of one four-metrics pipeline besides the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plan: SplitPlan,
    pub emulator: EmulatorSpec,
    pub finetune: FinetuneConfig,
    /// Used when the emulator spec asks for distillation.
    pub distill: DistillConfig,
    /// Skip the full fine-tuning baseline.
    #[serde(default)]
    pub skip_full_ft: bool,
}

/// Data for a pipeline run: downstream split and distillation text.
pub struct PipelineData<'d> {
    pub downstream: &'d CorpusSplit,
    pub distill_tokens: &'d [u32],
}

/// Owner-side emulator construction (with distillation when requested).
pub fn prepare_emulator(s: &SplitModel<f32>, spec: &EmulatorSpec, distill_tokens: &[u32], cfg: &DistillConfig) -> Result<SplitModel<f32>> {
    match spec {
        EmulatorSpec::Distilled { plan, steps } => {
            let start = s.emulate(&EmulatorSpec::LayerDrop { plan: plan.clone() })?;
            let cfg = DistillConfig { steps: *steps, ..*cfg };
            let (blocks, _) = distill_emulator(s, start.middle, distill_tokens, &cfg)?;
            s.with_emulator(blocks, spec.clone())
        }
        other => s.emulate(other),
    }
}

/// Zero-shot, emulator fine-tuning, plug-in and full fine-tuning from the
/// same base weights and data order.
pub fn four_metrics(base: &TransformerModel<f32>, seed: u64, cfg: &PipelineConfig, data: &PipelineData<'_>) -> MetricsRecord {
    let mut rec = MetricsRecord {
        seed,
        config_fingerprint: canonical_hash(cfg),
        zero_shot_ppl: None,
        emulator_ppl: None,
        plug_in_ppl: None,
        full_ft_ppl: None,
        emulator_best_lr: None,
        full_ft_best_lr: None,
        failure: None,
    };
    if let Err(e) = run_four(base, cfg, data, &mut rec) {
        rec.failure = Some(e.to_string());
    }
    rec
}

fn run_four(base: &TransformerModel<f32>, cfg: &PipelineConfig, data: &PipelineData<'_>, rec: &mut MetricsRecord) -> Result<()> {
    let ft = &cfg.finetune;
    let val = &data.downstream.validation;
    let train = &data.downstream.train;
    rec.zero_shot_ppl = Some(perplexity(base, val, ft.seq_len, ft.batch_size)?.perplexity);

    let s = split(base, cfg.plan)?;
    let emu = prepare_emulator(&s, &cfg.emulator, data.distill_tokens, &cfg.distill)?;
    let tuned = finetune(&emu, train, val, ft)?;
    rec.emulator_best_lr = Some(tuned.best_lr);
    rec.emulator_ppl = Some(perplexity(&tuned.model, val, ft.seq_len, ft.batch_size)?.perplexity);

    let plugged = plug_in(base, &tuned.model.adapter)?;
    rec.plug_in_ppl = Some(perplexity(&plugged, val, ft.seq_len, ft.batch_size)?.perplexity);

    if !cfg.skip_full_ft {
        let full = full_finetune(base, train, val, ft)?;
        rec.full_ft_best_lr = Some(full.1);
        rec.full_ft_ppl = Some(perplexity(&full.0, val, ft.seq_len, ft.batch_size)?.perplexity);
    }
    Ok(())
}

/// Fine-tunes every block and the final norm; embedding tables stay frozen.
pub fn full_finetune(base: &TransformerModel<f32>, train: &[u32], val: &[u32], ft: &FinetuneConfig) -> Result<(TransformerModel<f32>, f64)> {
    let mut model = base.clone();
    model.set_finetune_trainable();
    let out = finetune(&model, train, val, ft)?;
    Ok((out.model, out.best_lr))
}

/// Partial fine-tuning of the adapter layers against the original middle
/// (no emulator), then evaluation of the resulting full model.
pub fn partial_finetune_ppl(base: &TransformerModel<f32>, plan: SplitPlan, train: &[u32], val: &[u32], ft: &FinetuneConfig) -> Result<f64> {
    let s = split(base, plan)?;
    let tuned = finetune(&s, train, val, ft)?;
    let plugged = plug_in(base, &tuned.model.adapter)?;
    Ok(perplexity(&plugged, val, ft.seq_len, ft.batch_size)?.perplexity)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    AdapterPosition,
    CompressionMethod,
    Distillation,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter-position" => Ok(AblationAxis::AdapterPosition),
            "compression-method" | "compression" => Ok(AblationAxis::CompressionMethod),
            "distillation" => Ok(AblationAxis::Distillation),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected adapter-position, compression-method or distillation)"
            ))),
        }
    }
}

/// One grid point: a label and the settings it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub label: String,
    pub plan: SplitPlan,
    /// `None` tunes against the original middle.
    pub emulator: Option<EmulatorSpec>,
}

/// Default grid points of an axis for a model of `n_layers` blocks.
pub fn ablation_points(axis: AblationAxis, n_layers: usize, base: &PipelineConfig) -> Result<Vec<AblationPoint>> {
    let m = base.plan.middle_len(n_layers);
    Ok(match axis {
        AblationAxis::AdapterPosition => {
            let budget = base.plan.n_bottom + base.plan.n_top;
            let half = budget / 2;
            vec![
                AblationPoint {
                    label: format!("sandwich-{half}+{}", budget - half),
                    plan: SplitPlan::sandwich(half, budget - half),
                    emulator: None,
                },
                AblationPoint {
                    label: format!("top-{budget}"),
                    plan: SplitPlan::sandwich(0, budget),
                    emulator: None,
                },
                AblationPoint {
                    label: format!("bottom-{budget}"),
                    plan: SplitPlan::sandwich(budget, 0),
                    emulator: None,
                },
            ]
        }
        AblationAxis::CompressionMethod => vec![
            AblationPoint {
                label: "layer-drop".into(),
                plan: base.plan,
                emulator: Some(EmulatorSpec::layer_drop(m, (m / 2).max(2))?),
            },
            AblationPoint {
                label: "magnitude-prune".into(),
                plan: base.plan,
                emulator: Some(EmulatorSpec::MagnitudePrune { sparsity: 0.5 }),
            },
            AblationPoint {
                label: "quantize".into(),
                plan: base.plan,
                emulator: Some(EmulatorSpec::Quantize { bits: 8 }),
            },
        ],
        AblationAxis::Distillation => {
            let (plan, steps) = match &base.emulator {
                EmulatorSpec::LayerDrop { plan } => (plan.clone(), base.distill.steps),
                EmulatorSpec::Distilled { plan, steps } => (plan.clone(), *steps),
                _ => (crate::surgery::uniform_layer_drop(m, (m / 2).max(2))?, base.distill.steps),
            };
            vec![
                AblationPoint {
                    label: "layer-drop".into(),
                    plan: base.plan,
                    emulator: Some(EmulatorSpec::LayerDrop { plan: plan.clone() }),
                },
                AblationPoint {
                    label: "distilled".into(),
                    plan: base.plan,
                    emulator: Some(EmulatorSpec::Distilled { plan, steps }),
                },
            ]
        }
    })
}

/// One result row of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub point: String,
    pub seed: u64,
    pub plug_in_ppl: Option<f64>,
    pub emulator_ppl: Option<f64>,
    /// Bytes the middle stand-in occupies at its stored precision.
    pub middle_bytes: usize,
    pub failure: Option<String>,
}

/// Mean and spread of one point across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub point: String,
    pub seeds: usize,
    pub mean_plug_in_ppl: f64,
    pub min_plug_in_ppl: f64,
    pub max_plug_in_ppl: f64,
    pub mean_emulator_ppl: Option<f64>,
}

/// Stored bytes of the middle stand-in described by `spec` (original middle
/// when `None`): float32 for dense weights, nonzero count for pruned ones,
/// `bits` per weight for quantized matrices.
pub fn middle_bytes(split_model: &SplitModel<f32>, spec: Option<&EmulatorSpec>) -> usize {
    let mut bytes = 0usize;
    for b in &split_model.middle {
        for (name, t) in b.named_tensors("") {
            let is_matrix = t.rank() == 2 && name.ends_with("weight");
            bytes += match spec {
                Some(EmulatorSpec::MagnitudePrune { .. }) if is_matrix => t.data().iter().filter(|v| **v != 0.0).count() * 4,
                Some(EmulatorSpec::Quantize { bits }) if is_matrix => (t.numel() * *bits as usize).div_ceil(8),
                _ => t.numel() * 4,
            };
        }
    }
    bytes
}

/// Runs one grid point for one seed.
pub fn ablation_row(
    axis: AblationAxis,
    point: &AblationPoint,
    base: &TransformerModel<f32>,
    seed: u64,
    cfg: &PipelineConfig,
    data: &PipelineData<'_>,
) -> AblationRow {
    let mut row = AblationRow {
        axis,
        point: point.label.clone(),
        seed,
        plug_in_ppl: None,
        emulator_ppl: None,
        middle_bytes: 0,
        failure: None,
    };
    let ft = &cfg.finetune;
    let (train, val) = (&data.downstream.train, &data.downstream.validation);
    let result = (|| -> Result<()> {
        match &point.emulator {
            None => {
                let s = split(base, point.plan)?;
                row.middle_bytes = middle_bytes(&s, None);
                row.plug_in_ppl = Some(partial_finetune_ppl(base, point.plan, train, val, ft)?);
            }
            Some(spec) => {
                let s = split(base, point.plan)?;
                let emu = prepare_emulator(&s, spec, data.distill_tokens, &cfg.distill)?;
                row.middle_bytes = middle_bytes(&emu, Some(spec));
                let tuned = finetune(&emu, train, val, ft)?;
                row.emulator_ppl = Some(perplexity(&tuned.model, val, ft.seq_len, ft.batch_size)?.perplexity);
                let plugged = plug_in(base, &tuned.model.adapter)?;
                row.plug_in_ppl = Some(perplexity(&plugged, val, ft.seq_len, ft.batch_size)?.perplexity);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        row.failure = Some(e.to_string());
    }
    row
}

/// Per-point mean and range over seeds, in point order. Failed rows are
/// left out of the statistics.
pub fn summarize(points: &[AblationPoint], rows: &[AblationRow]) -> Vec<AblationSummary> {
    points
        .iter()
        .map(|p| {
            let ok: Vec<&AblationRow> = rows.iter().filter(|r| r.point == p.label && r.plug_in_ppl.is_some()).collect();
            let plug: Vec<f64> = ok.iter().filter_map(|r| r.plug_in_ppl).collect();
            let emu: Vec<f64> = ok.iter().filter_map(|r| r.emulator_ppl).collect();
            AblationSummary {
                point: p.label.clone(),
                seeds: plug.len(),
                mean_plug_in_ppl: mean(&plug),
                min_plug_in_ppl: plug.iter().cloned().fold(f64::INFINITY, f64::min),
                max_plug_in_ppl: plug.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean_emulator_ppl: (!emu.is_empty()).then(|| mean(&emu)),
            }
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s / values.len() as f64
}

/// Writes the raw rows and the per-point summary next to each other.
pub fn write_ablation_report(dir: &Path, axis_name: &str, rows: &[AblationRow], summary: &[AblationSummary]) -> Result<()> {
    let flat: Vec<AblationCsvRow> = rows.iter().map(AblationCsvRow::from).collect();
    write_csv(&dir.join(format!("ablation-{axis_name}.csv")), &flat)?;
    write_csv(&dir.join(format!("ablation-{axis_name}-summary.csv")), summary)
}

#[derive(Serialize)]
struct AblationCsvRow {
    point: String,
    seed: u64,
    plug_in_ppl: Option<f64>,
    emulator_ppl: Option<f64>,
    middle_bytes: usize,
    failure: Option<String>,
}

impl From<&AblationRow> for AblationCsvRow {
    fn from(r: &AblationRow) -> Self {
        Self {
            point: r.point.clone(),
            seed: r.seed,
            plug_in_ppl: r.plug_in_ppl,
            emulator_ppl: r.emulator_ppl,
            middle_bytes: r.middle_bytes,
            failure: r.failure.clone(),
        }
    }
}

/// Trainable tensor count of a model, handy for budget checks.
pub fn trainable_params<T: Float, M: NamedTensors<T>>(m: &M) -> usize {
    m.trainable_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransformerModel};
    use crate::tensor::Var;

    /// Logits that ignore the input: constant rows, or a one-hot on the
    /// true next token when `oracle` is set.
    struct Fixed {
        cfg: ModelConfig,
        oracle: Option<Vec<u32>>,
    }

    impl LanguageModel<f64> for Fixed {
        fn config(&self) -> &ModelConfig {
            &self.cfg
        }

        fn logits<'a>(&'a self, g: &Graph<'a, f64>, ids: &[u32], _batch: usize, _seq: usize) -> Result<Var> {
            let v = self.cfg.vocab_size;
            let mut data = vec![0.0; ids.len() * v];
            if let Some(stream) = &self.oracle {
                // Ids here are distinct stream positions; the next one is the target.
                for (r, &id) in ids.iter().enumerate() {
                    let pos = stream.iter().position(|&t| t == id).unwrap();
                    data[r * v + stream[pos + 1] as usize] = 1e4;
                }
            }
            Ok(g.input(crate::tensor::Tensor::new(vec![ids.len(), v], data)?))
        }
    }

    #[test]
    fn uniform_and_perfect_models() {
        let cfg = ModelConfig {
            vocab_size: 256,
            ..ModelConfig::toy()
        };
        let toks: Vec<u32> = (0..200).collect();
        let u = Fixed { cfg: cfg.clone(), oracle: None };
        let r = perplexity(&u, &toks, 16, 3).unwrap();
        assert_eq!(r.tokens, 199);
        assert!((r.perplexity - 256.0).abs() < 1e-9);
        let p = Fixed {
            cfg,
            oracle: Some(toks.clone()),
        };
        assert!((perplexity(&p, &toks, 16, 3).unwrap().perplexity - 1.0).abs() < 1e-12);
        assert!(perplexity(&u, &toks[..1], 16, 3).is_err());
    }

    /// Independent single-pass oracle: one forward per window, NLL from
    /// log-sum-exp written out directly, accumulated in window order.
    fn oracle_nll(model: &TransformerModel<f64>, toks: &[u32], seq: usize) -> (f64, usize) {
        let mut total = 0.0;
        let mut n = 0;
        let mut start = 0;
        while start + 1 < toks.len() {
            let len = seq.min(toks.len() - 1 - start);
            let logits = model.forward_full(&toks[start..start + len], 1, len).unwrap();
            let v = model.config.vocab_size;
            for t in 0..len {
                let row = &logits.data()[t * v..(t + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[toks[start + t + 1] as usize];
                n += 1;
            }
            start += len;
        }
        (total, n)
    }

    #[test]
    fn perplexity_matches_single_pass_oracle() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_seq_len: 32,
            ..ModelConfig::toy()
        };
        let model = TransformerModel::<f64>::init(cfg, 11).unwrap();
        let text = crate::data::Corpus::bundled(crate::data::Bundled::VillageRegistry);
        let toks = &text.tokens[..301];
        for (seq, batch) in [(32, 4), (7, 2), (32, 1)] {
            let r = perplexity(&model, toks, seq, batch).unwrap();
            let (nll, n) = oracle_nll(&model, toks, seq);
            assert_eq!(r.tokens, n);
            let want = (nll / n as f64).exp();
            assert!(((r.perplexity - want) / want).abs() < 1e-6, "{} vs {want}", r.perplexity);
        }
    }

    #[test]
    fn untrained_pipeline_has_equal_zero_shot_and_plug_in() {
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_seq_len: 16,
            ..ModelConfig::toy()
        };
        let base = TransformerModel::<f32>::init(cfg, 1).unwrap();
        let corpus = crate::data::Corpus::from_bytes("t", &crate::data::Bundled::VillageRegistry.bytes()[..6000]);
        let downstream = corpus.split(0.2).unwrap();
        let pc = PipelineConfig {
            plan: SplitPlan::sandwich(1, 1),
            emulator: EmulatorSpec::layer_drop(2, 2).unwrap(),
            finetune: FinetuneConfig {
                lr_grid: vec![1e-3],
                epochs: 0,
                steps_per_epoch: 4,
                batch_size: 2,
                seq_len: 16,
                ..FinetuneConfig::default()
            },
            distill: DistillConfig::default(),
            skip_full_ft: false,
        };
        let data = PipelineData {
            downstream: &downstream,
            distill_tokens: &corpus.tokens,
        };
        let rec = four_metrics(&base, 1, &pc, &data);
        assert!(rec.is_complete(), "{rec:?}");
        assert_eq!(rec.zero_shot_ppl, rec.plug_in_ppl);
        assert_eq!(rec.zero_shot_ppl, rec.full_ft_ppl);
        assert_eq!(rec.zero_shot_ppl, rec.emulator_ppl);
        assert_eq!(rec, four_metrics(&base, 1, &pc, &data));
    }
}
