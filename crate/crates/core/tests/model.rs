use std::collections::BTreeMap;

use offsite::data::{tokenize, Bundled, BatchPlan, make_batches};
use offsite::model::{forward_segmented, Architecture, ModelConfig, NamedTensors, TransformerModel};
use offsite::tensor::gradcheck::{check_model, GradCheckConfig};
use offsite::tensor::{AdamWConfig, Graph};
use offsite::tuning::{batch_loss, train, TrainConfig};
use proptest::prelude::*;

fn small(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 11,
        max_seq_len: 16,
        tie_embeddings: true,
        layer_norm_eps: 1e-5,
    }
}

/// Plain-loop forward pass over a name → values map, sharing nothing with
/// the graph code.
struct Reference {
    w: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    cfg: ModelConfig,
}

impl Reference {
    fn new(m: &TransformerModel<f64>) -> Self {
        let w = m
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.data().to_vec())))
            .collect();
        Self { w, cfg: m.config.clone() }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.w[name].1
    }

    fn norm(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let (g, b) = (self.get(&format!("{prefix}.gain")), self.get(&format!("{prefix}.bias")));
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let r = 1.0 / (var + self.cfg.layer_norm_eps).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mu) * r * g[i] + b[i]).collect()
    }

    fn linear(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let (shape, w) = &self.w[&format!("{prefix}.weight")];
        let b = self.get(&format!("{prefix}.bias"));
        (0..shape[1])
            .map(|o| b[o] + (0..shape[0]).map(|i| x[i] * w[i * shape[1] + o]).sum::<f64>())
            .collect()
    }

    fn logits(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        let d = self.cfg.d_model;
        let tok = self.get("embed.token");
        let pos = self.get("embed.position");
        let mut xs: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| (0..d).map(|j| tok[id as usize * d + j] + pos[t * d + j]).collect())
            .collect();
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        for l in 0..self.cfg.n_layers {
            let p = format!("blocks.{l}");
            let qkv: Vec<Vec<f64>> = xs.iter().map(|x| self.linear(&self.norm(x, &format!("{p}.ln1")), &format!("{p}.attn.qkv"))).collect();
            let mut att = vec![vec![0.0; d]; xs.len()];
            for h in 0..heads {
                for t in 0..xs.len() {
                    let q = &qkv[t][h * hd..(h + 1) * hd];
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| q.iter().zip(&qkv[s][d + h * hd..d + (h + 1) * hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (s, es) in e.iter().enumerate() {
                        for j in 0..hd {
                            att[t][h * hd + j] += es / z * qkv[s][2 * d + h * hd + j];
                        }
                    }
                }
            }
            for (x, a) in xs.iter_mut().zip(&att) {
                let o = self.linear(a, &format!("{p}.attn.out"));
                for j in 0..d {
                    x[j] += o[j];
                }
                let up = self.linear(&self.norm(x, &format!("{p}.ln2")), &format!("{p}.mlp.up"));
                let act: Vec<f64> = up
                    .iter()
                    .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u)).tanh()))
                    .collect();
                let down = self.linear(&act, &format!("{p}.mlp.down"));
                for j in 0..d {
                    x[j] += down[j];
                }
            }
        }
        xs.iter()
            .map(|x| {
                let h = self.norm(x, "head.norm");
                (0..self.cfg.vocab_size).map(|v| (0..d).map(|j| h[j] * tok[v * d + j]).sum()).collect()
            })
            .collect()
    }
}

const IDS: [u32; 6] = [3, 1, 4, 1, 5, 9];
/// Logit sum and first-row logits of the seed-42 model on `IDS`, from the
/// reference implementation.
const FINGERPRINT_SUM: f64 = 1.087_674_085_674_253_9;
const FINGERPRINT_ROW0: [f64; 11] = [
    0.036_463_481_380_123_83,
    -0.008_765_016_205_466_459,
    0.069_236_953_689_827_4,
    0.141_295_794_542_865,
    0.007_296_733_169_099_182,
    -0.035_691_635_474_531_26,
    -0.036_485_390_516_320_666,
    0.029_814_993_285_412_754,
    -0.053_592_603_840_804_36,
    0.053_687_164_461_154_97,
    0.055_519_645_670_104_326,
];

#[test]
fn forward_matches_straight_line_reference_and_fingerprint() {
    let m = TransformerModel::<f64>::init(small(Architecture::Gpt2Like), 42).unwrap();
    let want = Reference::new(&m).logits(&IDS);
    let got = m.forward_full(&IDS, 1, IDS.len()).unwrap();
    for (t, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            let g = got.data()[t * 11 + v];
            assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()), "t={t} v={v}: {g} vs {w}");
        }
    }
    let sum: f64 = want.iter().flatten().sum();
    assert!((sum - FINGERPRINT_SUM).abs() < 1e-9, "{sum:e}");
    for (a, b) in want[0].iter().zip(FINGERPRINT_ROW0) {
        assert!((a - b).abs() < 1e-9, "{a:e} vs {b:e}");
    }
}

fn toy_batch_model(arch: Architecture, seed: u64) -> TransformerModel<f64> {
    TransformerModel::<f64>::init(
        ModelConfig {
            vocab_size: 16,
            ..small(arch)
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_rows_are_independent(seed in 0u64..1000, ids in proptest::collection::vec(0u32..16, 12)) {
        let m = toy_batch_model(Architecture::OptLike, seed);
        let both = m.forward_full(&ids, 2, 6).unwrap();
        let mut swapped = ids[6..].to_vec();
        swapped.extend_from_slice(&ids[..6]);
        let flipped = m.forward_full(&swapped, 2, 6).unwrap();
        let row = 6 * 16;
        prop_assert_eq!(&both.data()[..row], &flipped.data()[row..]);
        prop_assert_eq!(&both.data()[row..], &flipped.data()[..row]);
    }

    #[test]
    fn later_tokens_never_change_earlier_logits(seed in 0u64..1000, ids in proptest::collection::vec(0u32..16, 2..16), cut in 1usize..15) {
        let cut = cut.min(ids.len() - 1);
        let m = toy_batch_model(Architecture::Gpt2Like, seed);
        let full = m.forward_full(&ids, 1, ids.len()).unwrap();
        let prefix = m.forward_full(&ids[..cut], 1, cut).unwrap();
        prop_assert_eq!(prefix.data(), &full.data()[..cut * 16]);
    }

    #[test]
    fn every_split_composes_to_the_full_forward(seed in 0u64..1000, a in 0usize..=4, b in 0usize..=4) {
        let cfg = ModelConfig { n_layers: 4, ..small(Architecture::Gpt2Like) };
        let m = TransformerModel::<f64>::init(cfg.clone(), seed).unwrap();
        let (i, j) = (a.min(b), a.max(b));
        let ids = [1, 2, 3, 4, 5, 6, 7, 8];
        let seg = forward_segmented(&cfg, &m.embeddings, &m.blocks[..i], &m.blocks[i..j], &m.blocks[j..], &m.head, &ids, 2, 4).unwrap();
        let full = m.forward_full(&ids, 2, 4).unwrap();
        prop_assert_eq!(seg.logits.data(), full.data());
    }
}

#[test]
fn segment_taps_replay_block_by_block() {
    let cfg = ModelConfig {
        n_layers: 4,
        ..small(Architecture::OptLike)
    };
    let m = TransformerModel::<f64>::init(cfg.clone(), 3).unwrap();
    let ids = [1, 0, 4, 2];
    let seg = forward_segmented(&cfg, &m.embeddings, &m.blocks[..1], &m.blocks[1..3], &m.blocks[3..], &m.head, &ids, 1, 4).unwrap();
    let g = Graph::new();
    let x = m.embeddings.forward(&g, &cfg, &ids, 1, 4).unwrap();
    let a1 = m.blocks[0].forward(&g, x, 1, 4, &cfg).unwrap();
    assert_eq!(g.value(a1).data(), seg.hidden_after_a1.data());
    let mut h = a1;
    for b in &m.blocks[1..3] {
        h = b.forward(&g, h, 1, 4, &cfg).unwrap();
    }
    assert_eq!(g.value(h).data(), seg.hidden_after_middle.data());

    let empty = forward_segmented(&cfg, &m.embeddings, &m.blocks[..2], &[], &m.blocks[2..], &m.head, &ids, 1, 4).unwrap();
    assert_eq!(empty.logits.data(), m.forward_full(&ids, 1, 4).unwrap().data());
    let wrong = TransformerModel::<f64>::init(ModelConfig { d_model: 4, ..cfg.clone() }, 3).unwrap();
    assert!(forward_segmented(&cfg, &m.embeddings, &m.blocks[..1], &wrong.blocks[..1], &m.blocks[2..], &m.head, &ids, 1, 4).is_err());
}

#[test]
fn overlong_sequences_are_rejected() {
    let m = TransformerModel::<f64>::init(small(Architecture::Gpt2Like), 0).unwrap();
    assert!(m.forward_full(&[0; 17], 1, 17).is_err());
}

#[test]
fn init_is_seeded_and_has_the_documented_spread() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 256,
        max_seq_len: 64,
        ..ModelConfig::toy()
    };
    let a = TransformerModel::<f64>::init(cfg.clone(), 5).unwrap();
    assert!(a.bit_eq(&TransformerModel::<f64>::init(cfg.clone(), 5).unwrap()));
    assert!(!a.bit_eq(&TransformerModel::<f64>::init(cfg.clone(), 6).unwrap()));
    let resid = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
    for (name, t) in a.named_tensors() {
        let v = t.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let target = if name.ends_with("bias") {
            assert!(v.iter().all(|&x| x == 0.0), "{name}");
            continue;
        } else if name.ends_with("gain") {
            assert!(v.iter().all(|&x| x == 1.0), "{name}");
            continue;
        } else if name == "embed.position" {
            0.01
        } else if name.ends_with("attn.out.weight") || name.ends_with("mlp.down.weight") {
            resid
        } else {
            0.02
        };
        assert!((std / target - 1.0).abs() < 0.1, "{name}: {std} vs {target}");
    }
}

#[test]
fn fifty_steps_cut_the_loss_on_a_fixed_batch_by_a_fifth() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        vocab_size: 256,
        max_seq_len: 64,
        ..ModelConfig::toy()
    };
    let mut m = TransformerModel::<f32>::init(cfg, 0).unwrap();
    // 512 predicted tokens: 8 windows of 64.
    let tokens = tokenize(&Bundled::Narrative.bytes()[..513]);
    let tc = TrainConfig {
        steps: 50,
        batch_size: 8,
        seq_len: 64,
        lr: 3e-3,
        lr_min: 3e-3,
        warmup_steps: 0,
        seed: 0,
        adamw: AdamWConfig::default(),
    };
    let losses = train(&mut m, &tokens, &tc).unwrap();
    assert!(losses[49] <= 0.8 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn two_layer_model_loss_passes_gradient_check() {
    for arch in [Architecture::Gpt2Like, Architecture::OptLike] {
        let m = toy_batch_model(arch, 9);
        let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 16) as u32).collect();
        let batch = make_batches(&tokens, &BatchPlan { seq_len: 5, batch_size: 2, seed: 0 }, 0).unwrap().remove(0);
        let r = check_model(&m, |g, m| batch_loss(g, m, &batch), GradCheckConfig::default()).unwrap();
        assert_eq!(r.probes.len(), 25);
        assert!(r.passes(1e-4), "{arch:?}: {}", r.max_rel_error());
    }
}
