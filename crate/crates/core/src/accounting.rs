//! Parameter and byte counts computed from shapes alone, without allocating
//! any weights.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Architecture, ModelConfig, TransformerModel};
use crate::surgery::{EmulatorSpec, SplitPlan};
use crate::tuning::PeftMode;

/// Bytes per serialized parameter (bundles store f32).
pub const BYTES_PER_PARAM: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
    pub trainable: bool,
    pub transmitted: bool,
}

/// Totals plus the per-tensor rows they are summed from. `transmitted`
/// counts the tensors that cross between the two parties for the operation
/// that produced the report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub transmitted_params: usize,
    pub transmitted_bytes: usize,
    pub breakdown: Vec<TensorCount>,
}

impl ParamReport {
    fn from_rows(breakdown: Vec<TensorCount>) -> Self {
        let sum = |f: fn(&TensorCount) -> bool| breakdown.iter().filter(|r| f(r)).map(|r| r.params).sum::<usize>();
        let transmitted = sum(|r| r.transmitted);
        ParamReport {
            total_params: sum(|_| true),
            trainable_params: sum(|r| r.trainable),
            transmitted_params: transmitted,
            transmitted_bytes: transmitted * BYTES_PER_PARAM,
            breakdown,
        }
    }
}

type Shapes = Vec<(String, Vec<usize>)>;

fn linear(out: &mut Shapes, prefix: &str, i: usize, o: usize, peft: PeftMode) {
    out.push((format!("{prefix}.weight"), vec![i, o]));
    out.push((format!("{prefix}.bias"), vec![o]));
    if let PeftMode::Lora { rank, .. } = peft {
        out.push((format!("{prefix}.lora_a"), vec![i, rank]));
        out.push((format!("{prefix}.lora_b"), vec![rank, o]));
    }
}

fn norm(out: &mut Shapes, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d]));
    out.push((format!("{prefix}.bias"), vec![d]));
}

fn bottleneck(out: &mut Shapes, prefix: &str, d: usize, w: usize) {
    linear(out, &format!("{prefix}.down"), d, w, PeftMode::Full);
    linear(out, &format!("{prefix}.up"), w, d, PeftMode::Full);
}

/// Tensor names and shapes of one block in visiting order, with the extra
/// tensors `peft` attaches.
pub fn block_shapes(cfg: &ModelConfig, prefix: &str, peft: PeftMode) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    norm(&mut out, &format!("{prefix}.ln1"), d);
    match cfg.architecture {
        Architecture::Gpt2Like => linear(&mut out, &format!("{prefix}.attn.qkv"), d, 3 * d, peft),
        Architecture::OptLike => {
            for p in ["q", "k", "v"] {
                linear(&mut out, &format!("{prefix}.attn.{p}"), d, d, peft);
            }
        }
    }
    linear(&mut out, &format!("{prefix}.attn.out"), d, d, peft);
    if let PeftMode::Bottleneck { width } = peft {
        bottleneck(&mut out, &format!("{prefix}.adapter_attn"), d, width);
    }
    norm(&mut out, &format!("{prefix}.ln2"), d);
    linear(&mut out, &format!("{prefix}.mlp.up"), d, cfg.d_ff, peft);
    linear(&mut out, &format!("{prefix}.mlp.down"), cfg.d_ff, d, peft);
    if let PeftMode::Bottleneck { width } = peft {
        bottleneck(&mut out, &format!("{prefix}.adapter_mlp"), d, width);
    }
    out
}

pub fn embedding_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("embed.token".into(), vec![cfg.vocab_size, cfg.d_model]),
        ("embed.position".into(), vec![cfg.max_seq_len, cfg.d_model]),
    ]
}

pub fn head_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    norm(&mut out, "head.norm", cfg.d_model);
    if !cfg.tie_embeddings {
        out.push(("head.proj".into(), vec![cfg.d_model, cfg.vocab_size]));
    }
    out
}

fn rows(shapes: Shapes, trainable: impl Fn(&str) -> bool, transmitted: impl Fn(&str) -> bool) -> Vec<TensorCount> {
    shapes
        .into_iter()
        .map(|(name, shape)| TensorCount {
            params: shape.iter().product(),
            trainable: trainable(&name),
            transmitted: transmitted(&name),
            name,
            shape,
        })
        .collect()
}

/// Counts for tuning `cfg` with `peft`. With `plan = None` every block and
/// the final norm tune (full fine-tuning); embedding tables never count as
/// trainable unless the plan moves them into the adapter. Transmitted
/// tensors are those a tuned adapter returns to the owner.
pub fn count_params(cfg: &ModelConfig, plan: Option<SplitPlan>, peft: PeftMode) -> Result<ParamReport> {
    cfg.validate()?;
    let n = cfg.n_layers;
    let adapter: Vec<usize> = match plan {
        Some(p) => {
            p.validate(n)?;
            p.adapter_indices(n)
        }
        None => (0..n).collect(),
    };
    let (emb_in, head_in) = match plan {
        Some(p) => (p.include_embeddings_in_adapter, p.include_head_in_adapter),
        None => (false, true),
    };
    let mut out = Vec::new();
    let returned = |name: &str| peft == PeftMode::Full || peft.trains(name);
    out.extend(rows(embedding_shapes(cfg), |name| emb_in && peft.trains(name), |name| emb_in && returned(name)));
    for i in 0..n {
        let prefix = TransformerModel::<f32>::block_prefix(i);
        if adapter.contains(&i) {
            out.extend(rows(block_shapes(cfg, &prefix, peft), |name| peft.trains(name), returned));
        } else {
            out.extend(rows(block_shapes(cfg, &prefix, PeftMode::Full), |_| false, |_| false));
        }
    }
    out.extend(rows(head_shapes(cfg), |name| head_in && peft.trains(name), |name| head_in && returned(name)));
    Ok(ParamReport::from_rows(out))
}

/// What the owner ships for `plan` and `spec`, against the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    /// Rows of the shipped package; `total_params` is the full model.
    pub report: ParamReport,
    pub full_block_params: usize,
    pub shipped_block_params: usize,
    /// Shipped over full transformer-block parameters.
    pub block_ratio: f64,
    /// Shipped over full parameters, embeddings and head included.
    pub param_ratio: f64,
}

/// Adapter, emulator and frozen embeddings/head the owner sends, as
/// parameters and bytes. Every emulator method ships dense f32 blocks.
pub fn transmitted_footprint(plan: SplitPlan, spec: &EmulatorSpec, cfg: &ModelConfig) -> Result<Footprint> {
    cfg.validate()?;
    let n = cfg.n_layers;
    plan.validate(n)?;
    let m = plan.middle_len(n);
    spec.validate(m)?;
    let k = spec.emulator_len(m);
    let full = count_params(cfg, None, PeftMode::Full)?;
    let block_params = |r: &ParamReport| r.breakdown.iter().filter(|t| t.name.starts_with("blocks.")).map(|t| t.params).sum::<usize>();
    let full_block_params = block_params(&full);

    let mut shipped = Vec::new();
    shipped.extend(embedding_shapes(cfg));
    for i in plan.adapter_indices(n).into_iter().take(plan.n_bottom) {
        shipped.extend(block_shapes(cfg, &TransformerModel::<f32>::block_prefix(i), PeftMode::Full));
    }
    for j in 0..k {
        shipped.extend(block_shapes(cfg, &format!("emulator.{j}"), PeftMode::Full));
    }
    for i in n - plan.n_top..n {
        shipped.extend(block_shapes(cfg, &TransformerModel::<f32>::block_prefix(i), PeftMode::Full));
    }
    shipped.extend(head_shapes(cfg));
    let is_adapter = |name: &str| {
        name.starts_with("blocks.")
            || (plan.include_embeddings_in_adapter && name.starts_with("embed."))
            || (plan.include_head_in_adapter && name.starts_with("head."))
    };
    let mut report = ParamReport::from_rows(rows(shipped, is_adapter, |_| true));
    let shipped_block_params = report
        .breakdown
        .iter()
        .filter(|t| t.name.starts_with("blocks.") || t.name.starts_with("emulator."))
        .map(|t| t.params)
        .sum::<usize>();
    report.total_params = full.total_params;
    Ok(Footprint {
        full_block_params,
        shipped_block_params,
        block_ratio: shipped_block_params as f64 / full_block_params as f64,
        param_ratio: report.transmitted_params as f64 / full.total_params as f64,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::package_owner;
    use crate::model::{Block, NamedTensors};
    use crate::surgery::split;
    use crate::tuning::{AdapterWeights, BottleneckSpec, LoraSpec};
    use proptest::prelude::*;

    const MODES: [PeftMode; 4] = [
        PeftMode::Full,
        PeftMode::Lora { rank: 4, alpha: 4.0 },
        PeftMode::Bottleneck { width: 64 },
        PeftMode::Bitfit,
    ];

    fn within(got: usize, want: f64, tol: f64) -> bool {
        ((got as f64 - want) / want).abs() <= tol
    }

    #[test]
    fn reproduces_published_trainable_counts() {
        let xl = ModelConfig::gpt2_xl();
        let opt = ModelConfig::opt_1_3b();
        let plan = Some(SplitPlan::sandwich(2, 2));
        let tr = |cfg: &ModelConfig, plan, mode| count_params(cfg, plan, mode).unwrap().trainable_params;
        let cases = [
            (tr(&xl, None, PeftMode::Full), 1475e6, 0.02),
            (tr(&xl, plan, PeftMode::Full), 123e6, 0.02),
            (tr(&xl, plan, MODES[1]), 410e3, 0.02),
            (tr(&xl, plan, MODES[2]), 1.65e6, 0.02),
            (tr(&xl, plan, MODES[3]), 83e3, 0.15),
            (tr(&opt, None, PeftMode::Full), 1208e6, 0.02),
            (tr(&opt, plan, PeftMode::Full), 201e6, 0.02),
            (tr(&opt, plan, MODES[1]), 590e3, 0.02),
            (tr(&opt, plan, MODES[2]), 2.11e6, 0.02),
            (tr(&opt, plan, MODES[3]), 106e3, 0.15),
        ];
        for (got, want, tol) in cases {
            assert!(within(got, want, tol), "{got} vs {want}");
        }
    }

    #[test]
    fn closed_forms_per_block() {
        for cfg in [ModelConfig::gpt2_xl(), ModelConfig::opt_1_3b(), ModelConfig::toy()] {
            let d = cfg.d_model;
            let per = |mode| {
                let r = count_params(&cfg, Some(SplitPlan::sandwich(1, 0)), mode).unwrap();
                r.trainable_params
            };
            assert_eq!(per(PeftMode::Full), 12 * d * d + 13 * d);
            let lora = if cfg.architecture == Architecture::Gpt2Like { 64 * d } else { 72 * d };
            assert_eq!(per(MODES[1]), lora);
            assert_eq!(per(MODES[2]), 2 * (129 * d + 64));
            assert_eq!(per(PeftMode::Bitfit), 13 * d);
        }
    }

    #[test]
    fn zero_layer_adapter_trains_nothing() {
        for mode in MODES {
            let r = count_params(&ModelConfig::toy(), Some(SplitPlan::sandwich(0, 0)), mode).unwrap();
            assert_eq!(r.trainable_params, 0);
            assert_eq!(r.transmitted_params, 0);
        }
    }

    fn assert_rows_match(analytic: &[(String, Vec<usize>)], real: Vec<(String, &crate::tensor::Tensor<f32>)>) {
        assert_eq!(analytic.len(), real.len());
        for ((an, ash), (rn, rt)) in analytic.iter().zip(real) {
            assert_eq!(an, &rn);
            assert_eq!(ash.as_slice(), rt.shape(), "{an}");
        }
    }

    /// One block per preset and mode is allocated and compared with the
    /// analytic shapes; the remaining blocks share the same constructor.
    #[test]
    fn analytic_shapes_match_instantiated_blocks() {
        for cfg in [ModelConfig::gpt2_xl(), ModelConfig::opt_1_3b(), ModelConfig::toy()] {
            for mode in MODES {
                let a = AdapterWeights::<f32> {
                    plan: SplitPlan::sandwich(1, 0),
                    n_layers: cfg.n_layers,
                    mode: PeftMode::Full,
                    bottom: vec![Block::zeros(&cfg)],
                    top: Vec::new(),
                    embeddings: None,
                    head: None,
                    provenance: Default::default(),
                };
                let mut a = match mode {
                    PeftMode::Full => a,
                    PeftMode::Lora { rank, alpha } => a.attach_lora(LoraSpec { rank, alpha }, 0).unwrap(),
                    PeftMode::Bottleneck { width } => a.attach_bottleneck(BottleneckSpec { width }, 0).unwrap(),
                    PeftMode::Bitfit => a.attach_bitfit().unwrap(),
                };
                a.apply_mode_flags();
                let real = a.bottom[0].named_tensors("blocks.0");
                assert_rows_match(&block_shapes(&cfg, "blocks.0", mode), real);
                let trainable: usize = a.trainable_count();
                let r = count_params(&cfg, Some(SplitPlan::sandwich(1, 0)), mode).unwrap();
                assert_eq!(r.trainable_params, trainable);
            }
        }
    }

    #[test]
    fn analytic_counts_match_an_instantiated_toy_model() {
        let cfg = ModelConfig::toy();
        let model = TransformerModel::<f32>::init(cfg.clone(), 0).unwrap();
        let r = count_params(&cfg, None, PeftMode::Full).unwrap();
        assert_eq!(r.total_params, model.param_count());
        let mut ft = model.clone();
        ft.set_finetune_trainable();
        assert_eq!(r.trainable_params, ft.trainable_count());
        let names: Vec<&str> = r.breakdown.iter().map(|t| t.name.as_str()).collect();
        let real: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, real);

        let plan = SplitPlan::sandwich(2, 2);
        let s = split(&model, plan).unwrap();
        let r = count_params(&cfg, Some(plan), PeftMode::Full).unwrap();
        assert_eq!(r.trainable_params, s.trainable_count());
        let e = s.emulate(&EmulatorSpec::layer_drop(4, 2).unwrap()).unwrap();
        let bundle = package_owner(&s, &e).unwrap();
        let f = transmitted_footprint(plan, &EmulatorSpec::layer_drop(4, 2).unwrap(), &cfg).unwrap();
        assert_eq!(f.report.transmitted_bytes, bundle.payload.len());
        let listed: Vec<&str> = f.report.breakdown.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(listed, bundle.tensor_names());
    }

    #[test]
    fn footprint_examples() {
        let toy = ModelConfig::toy();
        let f = transmitted_footprint(SplitPlan::sandwich(2, 2), &EmulatorSpec::layer_drop(4, 2).unwrap(), &toy).unwrap();
        assert_eq!(f.shipped_block_params * 8, f.full_block_params * 6);
        let f = transmitted_footprint(SplitPlan::sandwich(2, 2), &EmulatorSpec::layer_drop(4, 4).unwrap(), &toy).unwrap();
        assert_eq!(f.shipped_block_params, f.full_block_params);
        let xl = ModelConfig::gpt2_xl();
        let f = transmitted_footprint(SplitPlan::sandwich(2, 2), &EmulatorSpec::layer_drop(44, 16).unwrap(), &xl).unwrap();
        assert_eq!(f.shipped_block_params * 48, f.full_block_params * 20);
        assert!(f.param_ratio < 1.0 && f.param_ratio > f.block_ratio);
        let f = transmitted_footprint(SplitPlan::sandwich(2, 2), &EmulatorSpec::Quantize { bits: 8 }, &toy).unwrap();
        assert_eq!(f.shipped_block_params, f.full_block_params);
    }

    proptest! {
        #[test]
        fn reports_are_consistent(n in 1usize..10, nb in 0usize..5, nt in 0usize..5, mode in 0usize..4, full in any::<bool>()) {
            prop_assume!(nb + nt < n);
            let cfg = ModelConfig { n_layers: n, ..ModelConfig::toy() };
            let plan = (!full).then(|| SplitPlan::sandwich(nb, nt));
            let r = count_params(&cfg, plan, MODES[mode]).unwrap();
            prop_assert!(r.trainable_params <= r.total_params);
            prop_assert!(r.transmitted_params <= r.total_params);
            prop_assert_eq!(r.total_params, r.breakdown.iter().map(|t| t.params).sum::<usize>());
            prop_assert_eq!(r.transmitted_bytes, 4 * r.transmitted_params);
            let k = 1 + (n - nb - nt) / 2;
            if !full && n - nb - nt >= 2 {
                let f = transmitted_footprint(SplitPlan::sandwich(nb, nt), &EmulatorSpec::layer_drop(n - nb - nt, k).unwrap(), &cfg).unwrap();
                prop_assert_eq!(f.shipped_block_params * n, f.full_block_params * (nb + nt + k));
            }
        }
    }
}
