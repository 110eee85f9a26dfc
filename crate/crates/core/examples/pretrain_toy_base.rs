//! Retrains the bundled toy base and writes `crates/core/data/toy_base.otb`.

use offsite::artifact::save_checkpoint;
use offsite::data::{Bundled, Corpus};
use offsite::model::{ModelConfig, NamedTensors};
use offsite::pretrained::{toy_pretrain_config, TOY_BASE_SEED};
use offsite::tuning::pretrain;

fn main() -> offsite::Result<()> {
    let narrative = Corpus::bundled(Bundled::Narrative);
    let (model, losses) = pretrain(ModelConfig::toy(), TOY_BASE_SEED, &narrative.tokens, &toy_pretrain_config())?;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_base.otb");
    save_checkpoint(&model).write(&path)?;
    println!("final loss {:.4}, weights {}", losses.last().copied().unwrap_or(f64::NAN), model.weights_hash());
    Ok(())
}
