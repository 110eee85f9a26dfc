//! Declarative run configuration, read from a TOML file.
//!
//! Every field has a default, so an empty file is the toy experiment:
//!
//! ```toml
//! preset = "toy"                  # toy, gpt2-xl or opt-1.3b
//! base = "bundled"                # bundled toy base, or "pretrain"
//! pretrain_corpus = "bundled:narrative"
//! downstream_corpus = "bundled:village-registry"
//! val_fraction = 0.05
//! plan = "2+2"                    # bottom+top adapter blocks
//! seeds = [0, 1, 2]
//! reports = "reports"
//!
//! [emulator]
//! method = "distilled"            # layer-drop, distilled, magnitude-prune, quantize
//! keep = 2                        # middle blocks kept by layer drop
//! distill_steps = 200
//! sparsity = 0.5
//! bits = 8
//!
//! [peft]
//! mode = "full"                   # full, lora, bottleneck, bitfit
//!
//! [finetune]
//! lr_grid = [0.001]
//! epochs = 3
//! steps_per_epoch = 50
//! batch_size = 8
//! seq_len = 64
//! warmup_steps = 10
//! lr_min = 0.0
//!
//! [distill]
//! lr = 0.001
//! batch_size = 8
//! seq_len = 64
//! warmup_steps = 10
//!
//! [pretrain]                      # only read when base = "pretrain"
//! steps = 3000
//! lr = 0.001
//! lr_min = 0.0001
//! warmup_steps = 20
//! seed = 0
//! ```
//!
//! `seed` inside `[finetune]` and `[distill]` is overwritten per run by the
//! entries of `seeds`. Relative corpus paths resolve against the directory
//! passed to [`RunConfig::resolve`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Bundled, Corpus};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::PipelineConfig;
use crate::model::{ModelConfig, TransformerModel};
use crate::surgery::{uniform_layer_drop, EmulatorSpec, SplitPlan};
use crate::tuning::{pretrain, FinetuneConfig, PeftMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseSource {
    /// The pinned pretrained toy model shipped with the crate.
    Bundled,
    /// Pretrain from `pretrain_corpus` with the `[pretrain]` settings.
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorSettings {
    pub method: String,
    pub keep: usize,
    pub distill_steps: usize,
    pub sparsity: f64,
    pub bits: u32,
}

impl Default for EmulatorSettings {
    fn default() -> Self {
        Self {
            method: "distilled".into(),
            keep: 2,
            distill_steps: 200,
            sparsity: 0.5,
            bits: 8,
        }
    }
}

impl EmulatorSettings {
    pub fn spec(&self, middle_len: usize) -> Result<EmulatorSpec> {
        let spec = match self.method.as_str() {
            "layer-drop" => EmulatorSpec::LayerDrop {
                plan: uniform_layer_drop(middle_len, self.keep)?,
            },
            "distilled" => EmulatorSpec::Distilled {
                plan: uniform_layer_drop(middle_len, self.keep)?,
                steps: self.distill_steps,
            },
            "magnitude-prune" => EmulatorSpec::MagnitudePrune { sparsity: self.sparsity },
            "quantize" => EmulatorSpec::Quantize { bits: self.bits },
            other => {
                return Err(Error::Config(format!(
                    "unknown emulator method `{other}` (expected layer-drop, distilled, magnitude-prune or quantize)"
                )))
            }
        };
        spec.validate(middle_len)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub base: BaseSource,
    pub pretrain_corpus: String,
    pub downstream_corpus: String,
    pub val_fraction: f64,
    pub plan: String,
    pub seeds: Vec<u64>,
    pub reports: String,
    pub emulator: EmulatorSettings,
    pub peft: PeftMode,
    pub finetune: FinetuneConfig,
    pub distill: DistillConfig,
    pub pretrain: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            base: BaseSource::Bundled,
            pretrain_corpus: format!("bundled:{}", Bundled::Narrative.name()),
            downstream_corpus: format!("bundled:{}", Bundled::VillageRegistry.name()),
            val_fraction: 0.05,
            plan: "2+2".into(),
            seeds: vec![0, 1, 2],
            reports: "reports".into(),
            emulator: EmulatorSettings::default(),
            peft: PeftMode::Full,
            finetune: FinetuneConfig::default(),
            distill: DistillConfig::default(),
            pretrain: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Every field written out, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are plain data")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset)
    }

    pub fn split_plan(&self) -> Result<SplitPlan> {
        self.plan.parse()
    }

    pub fn emulator_spec(&self) -> Result<EmulatorSpec> {
        let n = self.model_config()?.n_layers;
        let plan = self.split_plan()?;
        plan.validate(n)?;
        self.emulator.spec(plan.middle_len(n))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.model_config()?;
        self.emulator_spec()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.finetune.lr_grid.is_empty() || self.finetune.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_grid needs at least one positive learning rate".into()));
        }
        let ft = &self.finetune;
        if ft.batch_size == 0 || ft.seq_len == 0 || ft.seq_len > cfg.max_seq_len {
            return Err(Error::Config(format!(
                "finetune batch_size must be positive and seq_len in 1..={}",
                cfg.max_seq_len
            )));
        }
        if ft.total_steps() > 0 && ft.warmup_steps > ft.total_steps() {
            return Err(Error::Config("finetune warmup_steps exceeds epochs * steps_per_epoch".into()));
        }
        if self.emulator.method == "distilled" && self.distill.warmup_steps > self.emulator.distill_steps {
            return Err(Error::Config("distill warmup_steps exceeds emulator.distill_steps".into()));
        }
        if self.base == BaseSource::Bundled && cfg != ModelConfig::toy() {
            return Err(Error::Config("the bundled base model only exists for the toy preset".into()));
        }
        Ok(())
    }

    /// Pipeline settings for one seed.
    pub fn pipeline(&self, seed: u64) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            plan: self.split_plan()?,
            emulator: self.emulator_spec()?,
            finetune: FinetuneConfig {
                seed,
                ..self.finetune.clone()
            },
            distill: DistillConfig { seed, ..self.distill },
            skip_full_ft: false,
        })
    }

    /// Rewrites relative corpus paths against `dir`.
    pub fn resolve(mut self, dir: &Path) -> Self {
        for src in [&mut self.pretrain_corpus, &mut self.downstream_corpus] {
            if !src.starts_with("bundled:") && Path::new(src.as_str()).is_relative() {
                *src = dir.join(&*src).to_string_lossy().into_owned();
            }
        }
        self
    }

    pub fn reports_dir(&self, work: &Path) -> PathBuf {
        work.join(&self.reports)
    }

    pub fn base_model(&self) -> Result<TransformerModel<f32>> {
        match self.base {
            BaseSource::Bundled => crate::pretrained::toy_base(),
            BaseSource::Pretrain => {
                let corpus = load_corpus(&self.pretrain_corpus)?;
                let (model, _) = pretrain(self.model_config()?, self.pretrain.seed, &corpus.tokens, &self.pretrain)?;
                Ok(model)
            }
        }
    }
}

/// `bundled:<name>` or a file path.
pub fn load_corpus(source: &str) -> Result<Corpus> {
    match source.strip_prefix("bundled:") {
        Some(name) => Bundled::from_name(name)
            .map(Corpus::bundled)
            .ok_or_else(|| Error::Config(format!("no bundled corpus named `{name}`"))),
        None => Corpus::load(Path::new(source)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_and_round_trips() {
        let d = RunConfig::from_toml("").unwrap();
        assert_eq!(d, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
        let spec = d.emulator_spec().unwrap();
        assert!(matches!(spec, EmulatorSpec::Distilled { ref plan, steps: 200 } if plan.retained_indices == vec![0, 3]));
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = RunConfig::from_toml("plan = \"1+3\"\n[finetune]\nsteps_per_epoch = 7\n[peft]\nmode = \"lora\"\nrank = 2\nalpha = 4.0\n").unwrap();
        assert_eq!(c.split_plan().unwrap(), SplitPlan::sandwich(1, 3));
        assert_eq!(c.finetune.steps_per_epoch, 7);
        assert_eq!(c.finetune.epochs, FinetuneConfig::default().epochs);
        assert_eq!(c.peft, PeftMode::Lora { rank: 2, alpha: 4.0 });
        let p = c.pipeline(9).unwrap();
        assert_eq!((p.finetune.seed, p.distill.seed), (9, 9));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "colour = 1",
            "plan = \"2-2\"",
            "plan = \"5+5\"",
            "preset = \"gpt5\"",
            "val_fraction = 1.5",
            "seeds = []",
            "[emulator]\nmethod = \"magic\"",
            "[emulator]\nkeep = 9",
            "[finetune]\nlr_grid = []",
            "preset = \"gpt2-xl\"",
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_) | Error::Plan(_) | Error::Spec(_)), "{text}: {err}");
        }
    }

    #[test]
    fn corpus_sources() {
        assert_eq!(load_corpus("bundled:narrative").unwrap().name, "narrative");
        assert!(matches!(load_corpus("bundled:nope"), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.txt"), b"abc").unwrap();
        let c = RunConfig {
            downstream_corpus: "d.txt".into(),
            ..RunConfig::default()
        }
        .resolve(dir.path());
        assert_eq!(load_corpus(&c.downstream_corpus).unwrap().tokens, vec![97, 98, 99]);
        assert_eq!(c.pretrain_corpus, "bundled:narrative");
    }
}
