//! Work-directory layout.
//!
//! ```text
//! owner/model.otb      checkpoint            owner init
//! owner/split.json     split plan            owner split
//! owner/emulator.otb   adapter + emulator    owner build-emulator, owner distill
//! owner/issued.json    issued provenance     owner package
//! owner/plugged.otb    checkpoint            owner plug-in
//! exchange/package.otb sent to the user      owner package
//! exchange/return.otb  sent back             user package-return
//! user/tuned.otb       tuned adapter         user finetune
//! <reports>/*.csv      reports               eval and experiment commands
//! ```

use std::path::{Path, PathBuf};

use offsite::artifact::{ArtifactBundle, Role};
use offsite::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct Work {
    pub root: PathBuf,
}

impl Work {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("owner/model.otb")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("owner/split.json")
    }
    pub fn emulator(&self) -> PathBuf {
        self.root.join("owner/emulator.otb")
    }
    pub fn issued(&self) -> PathBuf {
        self.root.join("owner/issued.json")
    }
    pub fn plugged(&self) -> PathBuf {
        self.root.join("owner/plugged.otb")
    }
    pub fn package(&self) -> PathBuf {
        self.root.join("exchange/package.otb")
    }
    pub fn returned(&self) -> PathBuf {
        self.root.join("exchange/return.otb")
    }
    pub fn tuned(&self) -> PathBuf {
        self.root.join("user/tuned.otb")
    }
}

/// Error for a missing input, naming the command that produces it.
pub fn require(path: &Path, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing {}; run `offsite {stage}` first", path.display())))
    }
}

pub fn read_bundle(path: &Path, stage: &str) -> Result<ArtifactBundle> {
    require(path, stage)?;
    ArtifactBundle::read(path)
}

/// Reads a bundle for a user command: refuses whole-model files and any
/// role other than `want`.
pub fn read_user_bundle(path: &Path, want: Role) -> Result<ArtifactBundle> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing bundle {}", path.display())));
    }
    let bundle = ArtifactBundle::read(path)?;
    match bundle.manifest.role {
        Role::Checkpoint => Err(Error::Packaging(format!(
            "{} is a full-model file; user commands only accept owner packages and adapter bundles",
            path.display()
        ))),
        r if r != want => Err(Error::Format(format!("{} holds a {r:?} bundle, expected {want:?}", path.display()))),
        _ => Ok(bundle),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn write_bundle(path: &Path, bundle: &ArtifactBundle) -> Result<()> {
    ensure_parent(path)?;
    bundle.write(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, offsite::artifact::canonical_json(value) + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    require(path, stage)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}
