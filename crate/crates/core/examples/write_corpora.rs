//! Regenerates the bundled corpora under `crates/core/data/`.

use offsite::data::{sha256_hex, synth};

fn main() -> std::io::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir)?;
    for (file, bytes) in [
        ("narrative.txt", synth::narrative(synth::NARRATIVE_SEED, synth::NARRATIVE_BYTES)),
        ("village_registry.txt", synth::village_registry(synth::REGISTRY_SEED, synth::REGISTRY_BYTES, synth::REGISTRY_TAIL_BYTES)),
    ] {
        std::fs::write(dir.join(file), &bytes)?;
        println!("{file}: {} bytes, sha256 {}", bytes.len(), sha256_hex(&bytes));
    }
    Ok(())
}
