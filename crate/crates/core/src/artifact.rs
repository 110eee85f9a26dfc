//! Bundle files exchanged between the model owner and the data owner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{Block, ModelConfig, NamedTensors, TransformerModel};
use crate::surgery::{plug_in, split, EmulatorSpec, Middle, SplitModel, SplitPlan};
use crate::tensor::Tensor;
use crate::tuning::{AdapterWeights, BottleneckSpec, LoraSpec, PeftMode};

/// Canonical JSON: sorted keys, no insignificant whitespace.
pub fn canonical_json<S: Serialize + ?Sized>(value: &S) -> String {
    // `serde_json::Value` keeps object keys in a BTreeMap, so a round trip
    // through it sorts every level.
    let v = serde_json::to_value(value).expect("config types serialize");
    serde_json::to_string(&v).expect("values serialize")
}

pub fn canonical_hash<S: Serialize + ?Sized>(value: &S) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

/// Ties an adapter to the base model, split and emulator it was cut from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_model_hash: String,
    pub split_plan_hash: String,
    /// Empty until an emulator has been attached.
    pub emulator_spec_hash: String,
}

impl Provenance {
    /// Names of the fields that differ from `other`.
    pub fn diff(&self, other: &Provenance) -> Vec<String> {
        let mut out = Vec::new();
        if self.base_model_hash != other.base_model_hash {
            out.push("base_model_hash".to_string());
        }
        if self.split_plan_hash != other.split_plan_hash {
            out.push("split_plan_hash".to_string());
        }
        if self.emulator_spec_hash != other.emulator_spec_hash {
            out.push("emulator_spec_hash".to_string());
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        !self.base_model_hash.is_empty() && !self.split_plan_hash.is_empty() && !self.emulator_spec_hash.is_empty()
    }
}

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OTB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    OwnerPackage,
    AdapterReturn,
    /// A whole model; stays with the owner.
    Checkpoint,
}

/// Where one tensor lives in the payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub role: Role,
    pub model_id: String,
    /// Absent from adapter returns; the owner already has it.
    pub architecture: Option<ModelConfig>,
    /// Absent from checkpoints.
    pub split_plan: Option<SplitPlan>,
    pub emulator_spec: Option<EmulatorSpec>,
    pub peft_mode: PeftMode,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// Manifest plus the concatenated f32 payload.
///
/// On disk: `OTB1`, the manifest length as a little-endian u64, the
/// canonical manifest JSON, the 32-byte SHA-256 of that JSON, then the
/// payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactBundle {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

struct Header {
    role: Role,
    architecture: Option<ModelConfig>,
    split_plan: Option<SplitPlan>,
    emulator_spec: Option<EmulatorSpec>,
    peft_mode: PeftMode,
    provenance: Provenance,
}

impl ArtifactBundle {
    fn assemble(h: Header, tensors: Vec<(String, &Tensor<f32>)>) -> Self {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let bytes = t.le_bytes();
            entries.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                sha256: sha256_hex(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let model_id = format!("base-{}", &h.provenance.base_model_hash[..h.provenance.base_model_hash.len().min(16)]);
        ArtifactBundle {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                role: h.role,
                model_id,
                architecture: h.architecture,
                split_plan: h.split_plan,
                emulator_spec: h.emulator_spec,
                peft_mode: h.peft_mode,
                provenance: h.provenance,
                tensors: entries,
                payload_sha256: sha256_hex(&payload),
            },
            payload,
        }
    }

    /// SHA-256 of the canonical manifest, which itself covers the payload.
    pub fn manifest_hash(&self) -> String {
        canonical_hash(&self.manifest)
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.manifest.tensors.iter().map(|e| e.name.as_str()).collect()
    }

    /// Index layout, per-tensor checksums, then the payload hash.
    pub fn verify(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", m.format_version)));
        }
        let mut cursor = 0u64;
        let mut seen = BTreeSet::new();
        for e in &m.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Format(format!("tensor `{}` listed twice", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.offset != cursor {
                return Err(Error::Format(format!("tensor `{}` is not contiguous with its predecessor", e.name)));
            }
            cursor += e.byte_len();
            if cursor > self.payload.len() as u64 {
                return Err(Error::Format(format!("tensor `{}` runs past the payload", e.name)));
            }
            if sha256_hex(&self.payload[e.offset as usize..cursor as usize]) != e.sha256 {
                return Err(Error::Checksum(e.name.clone()));
            }
        }
        if cursor != self.payload.len() as u64 {
            return Err(Error::Format(format!("{} trailing payload bytes", self.payload.len() as u64 - cursor)));
        }
        if sha256_hex(&self.payload) != m.payload_sha256 {
            return Err(Error::Format("payload hash mismatch".into()));
        }
        Ok(())
    }

    /// Verified tensors by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor<f32>>> {
        self.verify()?;
        let mut out = BTreeMap::new();
        for e in &self.manifest.tensors {
            let bytes = &self.payload[e.offset as usize..(e.offset + e.byte_len()) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunks")))
                .collect();
            out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = canonical_json(&self.manifest);
        let mut out = Vec::with_capacity(44 + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&Sha256::digest(manifest.as_bytes()));
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and verifies a serialized bundle.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a bundle file".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let end = 12usize
            .checked_add(len)
            .filter(|&e| e + 32 <= bytes.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file".into()))?;
        let text = &bytes[12..end];
        if Sha256::digest(text).as_slice() != &bytes[end..end + 32] {
            return Err(Error::Format("manifest checksum mismatch".into()));
        }
        let manifest: Manifest = serde_json::from_slice(text)?;
        if canonical_json(&manifest).as_bytes() != text {
            return Err(Error::Format("manifest is not in canonical form".into()));
        }
        let b = ArtifactBundle {
            manifest,
            payload: bytes[end + 32..].to_vec(),
        };
        b.verify()?;
        Ok(b)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Copies `src` into `dst`; the two name sets and all shapes must agree.
fn load_into(dst: Vec<(String, &mut Tensor<f32>)>, src: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Format(format!("bundle has {} tensors, expected {}", src.len(), dst.len())));
    }
    for (name, t) in dst {
        let s = src
            .get(&name)
            .ok_or_else(|| Error::Format(format!("bundle is missing tensor `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {:?}", s.shape(), t.shape())));
        }
        t.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

/// Middle indices an emulator leaves out entirely.
fn dropped_layers(spec: &EmulatorSpec, m: usize) -> Vec<usize> {
    match spec {
        EmulatorSpec::LayerDrop { plan } | EmulatorSpec::Distilled { plan, .. } => {
            (0..m).filter(|i| !plan.retained_indices.contains(i)).collect()
        }
        _ => Vec::new(),
    }
}

/// Owner side: adapter, emulator and frame of `emulated`, never the middle of
/// `original`. Refuses when a middle tensor name appears, or when a packaged
/// tensor is byte-identical to a dropped middle tensor and to nothing else the
/// owner may ship.
pub fn package_owner(original: &SplitModel<f32>, emulated: &SplitModel<f32>) -> Result<ArtifactBundle> {
    if original.middle_source != Middle::Original {
        return Err(Error::contract("package_owner needs the original split as reference"));
    }
    let Middle::Emulator(spec) = &emulated.middle_source else {
        return Err(Error::Packaging("the split to ship carries the original middle".into()));
    };
    let fields = original.adapter.provenance.diff(&emulated.adapter.provenance);
    if fields.iter().any(|f| f != "emulator_spec_hash") {
        return Err(Error::Packaging("emulator was not built from this split".into()));
    }
    let tensors = emulated.named_tensors();
    let middle = original.middle_named_tensors();
    let secret: BTreeSet<&str> = middle.iter().map(|(n, _)| n.as_str()).collect();
    if let Some((n, _)) = tensors.iter().find(|(n, _)| secret.contains(n.as_str())) {
        return Err(Error::Packaging(format!("middle tensor `{n}` would be shipped")));
    }

    let nb = original.plan().n_bottom;
    let dropped: BTreeSet<String> = dropped_layers(spec, original.middle.len())
        .into_iter()
        .map(|i| format!("{}.", TransformerModel::<f32>::block_prefix(nb + i)))
        .collect();
    let is_dropped = |n: &str| dropped.iter().any(|p| n.starts_with(p.as_str()));
    let shippable: BTreeSet<String> = original
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !is_dropped(n))
        .map(|(_, t)| t.sha256())
        .collect();
    let forbidden: BTreeMap<String, &str> = middle
        .iter()
        .filter(|(n, _)| is_dropped(n))
        .map(|(n, t)| (t.sha256(), n.as_str()))
        .filter(|(h, _)| !shippable.contains(h))
        .collect();
    for (n, t) in &tensors {
        if let Some(src) = forbidden.get(&t.sha256()) {
            return Err(Error::Packaging(format!("`{n}` carries the bytes of dropped tensor `{src}`")));
        }
    }

    Ok(ArtifactBundle::assemble(
        Header {
            role: Role::OwnerPackage,
            architecture: Some(emulated.config.clone()),
            split_plan: Some(emulated.plan()),
            emulator_spec: Some(spec.clone()),
            peft_mode: emulated.adapter.mode,
            provenance: emulated.adapter.provenance.clone(),
        },
        tensors,
    ))
}

fn attach_mode(adapter: AdapterWeights<f32>, mode: PeftMode) -> Result<AdapterWeights<f32>> {
    // Seeds only shape the skeleton; every value is overwritten on load.
    match mode {
        PeftMode::Full => Ok(adapter),
        PeftMode::Lora { rank, alpha } => adapter.attach_lora(LoraSpec { rank, alpha }, 0),
        PeftMode::Bottleneck { width } => adapter.attach_bottleneck(BottleneckSpec { width }, 0),
        PeftMode::Bitfit => adapter.attach_bitfit(),
    }
}

/// User side: rebuilds the emulated split from an owner package.
pub fn unpack_owner(bundle: &ArtifactBundle) -> Result<SplitModel<f32>> {
    let m = &bundle.manifest;
    if m.role != Role::OwnerPackage {
        return Err(Error::Format("expected an owner package".into()));
    }
    let config = m
        .architecture
        .clone()
        .ok_or_else(|| Error::Format("owner package without architecture".into()))?;
    let spec = m
        .emulator_spec
        .clone()
        .ok_or_else(|| Error::Format("owner package without emulator spec".into()))?;
    let tensors = bundle.tensors()?;
    let skeleton = TransformerModel::<f32>::init(config.clone(), 0)?;
    let s = split(&skeleton, plan_of(m)?)?;
    let blocks = (0..spec.emulator_len(s.middle.len())).map(|_| Block::zeros(&config)).collect();
    let mut out = s.with_emulator(blocks, spec)?;
    out.adapter = attach_mode(out.adapter, m.peft_mode)?;
    out.adapter.provenance = m.provenance.clone();
    load_into(out.named_tensors_mut(), &tensors)?;
    out.freeze_all_but_adapter();
    Ok(out)
}

/// User side: the tensors the user changed plus provenance. Full mode ships
/// the whole adapter; PEFT modes only their trainable tensors.
pub fn package_return(tuned: &AdapterWeights<f32>) -> Result<ArtifactBundle> {
    if !tuned.provenance.is_complete() {
        return Err(Error::Packaging("adapter has no complete provenance".into()));
    }
    let tensors = match tuned.mode {
        PeftMode::Full => tuned.named_tensors(),
        _ => tuned.named_tensors().into_iter().filter(|(n, _)| tuned.mode.trains(n)).collect(),
    };
    Ok(ArtifactBundle::assemble(
        Header {
            role: Role::AdapterReturn,
            architecture: None,
            split_plan: Some(tuned.plan),
            emulator_spec: None,
            peft_mode: tuned.mode,
            provenance: tuned.provenance.clone(),
        },
        tensors,
    ))
}

/// Owner side: checks a returned adapter against the provenance the owner
/// issued and against `model`, then plugs it in.
pub fn verify_and_plug(model: &TransformerModel<f32>, bundle: &ArtifactBundle, issued: &Provenance) -> Result<TransformerModel<f32>> {
    let m = &bundle.manifest;
    if m.role != Role::AdapterReturn {
        return Err(Error::Format("expected an adapter return bundle".into()));
    }
    let tensors = bundle.tensors()?;
    let mut fields = m.provenance.diff(issued);
    if m.provenance.base_model_hash != model.weights_hash() && !fields.iter().any(|f| f == "base_model_hash") {
        fields.insert(0, "base_model_hash".into());
    }
    let plan = plan_of(m)?;
    if plan.hash() != m.provenance.split_plan_hash && !fields.iter().any(|f| f == "split_plan_hash") {
        fields.push("split_plan_hash".into());
    }
    if !fields.is_empty() {
        return Err(Error::Provenance { fields });
    }
    let s = split(model, plan)?;
    let adapter = load_adapter(s.adapter, m, &tensors)?;
    plug_in(model, &adapter)
}

fn plan_of(m: &Manifest) -> Result<SplitPlan> {
    m.split_plan.ok_or_else(|| Error::Format("bundle has no split plan".into()))
}

/// `base` (a full-mode adapter) with the returned tensors of `m` loaded.
fn load_adapter(base: AdapterWeights<f32>, m: &Manifest, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<AdapterWeights<f32>> {
    let mut adapter = attach_mode(base, m.peft_mode)?;
    adapter.provenance = m.provenance.clone();
    let mode = adapter.mode;
    let dst = adapter
        .named_tensors_mut()
        .into_iter()
        .filter(|(n, _)| mode == PeftMode::Full || mode.trains(n))
        .collect();
    load_into(dst, tensors)?;
    Ok(adapter)
}

/// User side: installs a returned adapter into the emulated split it was
/// tuned on, e.g. to evaluate it again.
pub fn apply_return(emulated: &SplitModel<f32>, bundle: &ArtifactBundle) -> Result<SplitModel<f32>> {
    let m = &bundle.manifest;
    if m.role != Role::AdapterReturn {
        return Err(Error::Format("expected an adapter return bundle".into()));
    }
    let fields = m.provenance.diff(&emulated.adapter.provenance);
    if !fields.is_empty() {
        return Err(Error::Provenance { fields });
    }
    if emulated.adapter.mode != PeftMode::Full || plan_of(m)? != emulated.plan() {
        return Err(Error::Format("adapter does not fit this package".into()));
    }
    let tensors = bundle.tensors()?;
    let mut out = emulated.clone();
    out.adapter = load_adapter(emulated.adapter.clone(), m, &tensors)?;
    out.freeze_all_but_adapter();
    Ok(out)
}

/// Whole-model file for the owner's own storage.
pub fn save_checkpoint(model: &TransformerModel<f32>) -> ArtifactBundle {
    ArtifactBundle::assemble(
        Header {
            role: Role::Checkpoint,
            architecture: Some(model.config.clone()),
            split_plan: None,
            emulator_spec: None,
            peft_mode: PeftMode::Full,
            provenance: Provenance {
                base_model_hash: model.weights_hash(),
                ..Provenance::default()
            },
        },
        model.named_tensors(),
    )
}

pub fn load_checkpoint(bundle: &ArtifactBundle) -> Result<TransformerModel<f32>> {
    let m = &bundle.manifest;
    if m.role != Role::Checkpoint {
        return Err(Error::Format("expected a model checkpoint".into()));
    }
    let config = m
        .architecture
        .clone()
        .ok_or_else(|| Error::Format("checkpoint without architecture".into()))?;
    let tensors = bundle.tensors()?;
    let mut model = TransformerModel::<f32>::init(config, 0)?;
    load_into(model.named_tensors_mut(), &tensors)?;
    if model.weights_hash() != m.provenance.base_model_hash {
        return Err(Error::Format("checkpoint weights do not match their recorded hash".into()));
    }
    Ok(model)
}
