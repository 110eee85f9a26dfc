//! Byte-level corpora, contiguous train/validation splits and seeded batching.

pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 256;

static NARRATIVE: &[u8] = include_bytes!("../../data/narrative.txt");
static VILLAGE_REGISTRY: &[u8] = include_bytes!("../../data/village_registry.txt");

/// SHA-256 of the bundled generic pretraining text.
pub const NARRATIVE_SHA256: &str = "30b1d44a6366ca65ebf81341b05e4a91985fe8d1fd7965511b466a09f41f5ff7";
/// SHA-256 of the bundled downstream registry.
pub const VILLAGE_REGISTRY_SHA256: &str = "1c063665a5b73472ea00245e16495d4a61ae69338f392e9bc4f8953ee9ee25f7";

/// The two corpora shipped with the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bundled {
    /// Generic prose used for pretraining and distillation.
    Narrative,
    /// Registry entries about the same world, used downstream.
    VillageRegistry,
}

impl Bundled {
    pub fn name(self) -> &'static str {
        match self {
            Bundled::Narrative => "narrative",
            Bundled::VillageRegistry => "village-registry",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Bundled::Narrative, Bundled::VillageRegistry].into_iter().find(|b| b.name() == name)
    }

    pub fn bytes(self) -> &'static [u8] {
        match self {
            Bundled::Narrative => NARRATIVE,
            Bundled::VillageRegistry => VILLAGE_REGISTRY,
        }
    }

    pub fn pinned_sha256(self) -> &'static str {
        match self {
            Bundled::Narrative => NARRATIVE_SHA256,
            Bundled::VillageRegistry => VILLAGE_REGISTRY_SHA256,
        }
    }
}

/// Byte → id, one token per byte.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index {
                what: "byte token",
                index: id as usize,
                bound: VOCAB_SIZE,
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A named token stream with its content hash.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub tokens: Vec<u32>,
    pub sha256: String,
}

impl Corpus {
    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            name: name.into(),
            tokens: tokenize(bytes),
            sha256: sha256_hex(bytes),
        }
    }

    pub fn bundled(which: Bundled) -> Self {
        Self::from_bytes(which.name(), which.bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Ok(Self::from_bytes(name, &bytes))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous split: the first `1 − val_fraction` of the stream trains,
    /// the rest validates.
    pub fn split(&self, val_fraction: f64) -> Result<CorpusSplit> {
        if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
        }
        let n = self.tokens.len();
        let boundary = n - ((n as f64 * val_fraction).round() as usize).min(n);
        Ok(CorpusSplit {
            corpus_sha256: self.sha256.clone(),
            val_fraction,
            boundary,
            train: self.tokens[..boundary].to_vec(),
            validation: self.tokens[boundary..].to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub corpus_sha256: String,
    pub val_fraction: f64,
    pub boundary: usize,
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
}

impl CorpusSplit {
    /// Identifies the partition: corpus hash, fraction and boundary only.
    pub fn hash(&self) -> String {
        sha256_hex(format!("{}:{}:{}", self.corpus_sha256, self.val_fraction, self.boundary).as_bytes())
    }
}

/// Window length, batch size and shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// `batch_size × seq_len` inputs with next-token targets, both row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Start offsets of the non-overlapping `(input, target)` windows.
pub fn window_starts(n_tokens: usize, seq_len: usize) -> Vec<usize> {
    if seq_len == 0 || n_tokens < 2 {
        return Vec::new();
    }
    (0..(n_tokens - 1) / seq_len).map(|w| w * seq_len).collect()
}

/// Shuffled full batches for one epoch. The order depends only on the
/// plan's seed and `epoch`; a trailing partial batch is dropped.
pub fn make_batches(tokens: &[u32], plan: &BatchPlan, epoch: u64) -> Result<Vec<Batch>> {
    if plan.seq_len == 0 || plan.batch_size == 0 {
        return Err(Error::contract("seq_len and batch_size must be positive"));
    }
    if tokens.len() < plan.seq_len + 1 {
        return Err(Error::contract(format!(
            "corpus of {} tokens is too small for seq_len {}",
            tokens.len(),
            plan.seq_len
        )));
    }
    let mut starts = window_starts(tokens.len(), plan.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(epoch);
    starts.shuffle(&mut rng);
    let l = plan.seq_len;
    Ok(starts
        .chunks_exact(plan.batch_size)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * l);
            let mut targets = Vec::with_capacity(chunk.len() * l);
            for &s in chunk {
                inputs.extend_from_slice(&tokens[s..s + l]);
                targets.extend_from_slice(&tokens[s + 1..s + l + 1]);
            }
            Batch {
                inputs,
                targets,
                batch_size: plan.batch_size,
                seq_len: l,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert!(detokenize(&[256]).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }

        #[test]
        fn every_target_is_the_next_token(n in 6usize..300, seq in 1usize..12, batch in 1usize..4, seed in 0u64..50) {
            prop_assume!(n > seq);
            let tokens: Vec<u32> = (0..n as u32).collect();
            let plan = BatchPlan { seq_len: seq, batch_size: batch, seed };
            let windows = (n - 1) / seq;
            let batches = make_batches(&tokens, &plan, 3).unwrap();
            prop_assert_eq!(batches.len(), windows / batch);
            for b in &batches {
                for row in 0..batch {
                    let inp = &b.inputs[row * seq..(row + 1) * seq];
                    let tgt = &b.targets[row * seq..(row + 1) * seq];
                    let start = inp[0] as usize;
                    prop_assert_eq!(inp, &tokens[start..start + seq]);
                    prop_assert_eq!(start % seq, 0);
                    prop_assert_eq!(tgt, &tokens[start + 1..start + seq + 1]);
                }
            }
        }
    }

    #[test]
    fn ten_tokens_give_two_windows() {
        let tokens: Vec<u32> = (0..10).collect();
        let plan = BatchPlan {
            seq_len: 4,
            batch_size: 1,
            seed: 0,
        };
        let batches = make_batches(&tokens, &plan, 0).unwrap();
        assert_eq!(batches.len(), 2);
        let mut firsts: Vec<u32> = batches.iter().map(|b| b.inputs[0]).collect();
        firsts.sort();
        assert_eq!(firsts, vec![0, 4]);
        assert!(make_batches(&tokens[..4], &plan, 0).is_err());
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch() {
        let tokens: Vec<u32> = (0..4000).map(|i| i % 251).collect();
        let plan = BatchPlan {
            seq_len: 8,
            batch_size: 4,
            seed: 9,
        };
        assert_eq!(make_batches(&tokens, &plan, 0).unwrap(), make_batches(&tokens, &plan, 0).unwrap());
        assert_ne!(make_batches(&tokens, &plan, 0).unwrap(), make_batches(&tokens, &plan, 1).unwrap());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stable() {
        let c = Corpus::from_bytes("t", b"abcdefghijklmnopqrst");
        let s = c.split(0.25).unwrap();
        assert_eq!(s.train.len() + s.validation.len(), c.len());
        assert_eq!(s.validation, tokenize(b"pqrst"));
        assert_eq!(s.hash(), c.split(0.25).unwrap().hash());
        assert_ne!(s.hash(), c.split(0.3).unwrap().hash());
        assert!(c.split(0.0).is_err());
        assert!(c.split(1.0).is_err());
    }

    #[test]
    fn bundled_corpora_match_pinned_hashes_and_generators() {
        for (which, regenerated) in [
            (Bundled::Narrative, synth::narrative(synth::NARRATIVE_SEED, synth::NARRATIVE_BYTES)),
            (Bundled::VillageRegistry, synth::village_registry(synth::REGISTRY_SEED, synth::REGISTRY_BYTES, synth::REGISTRY_TAIL_BYTES)),
        ] {
            let c = Corpus::bundled(which);
            assert_eq!(c.sha256, which.pinned_sha256(), "{}", which.name());
            assert_eq!(regenerated, which.bytes(), "{}", which.name());
        }
    }
}
