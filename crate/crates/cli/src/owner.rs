use clap::Subcommand;
use offsite::artifact::{load_checkpoint, package_owner, save_checkpoint, unpack_owner, verify_and_plug, Provenance, Role};
use offsite::config::{load_corpus, BaseSource, EmulatorSettings, RunConfig};
use offsite::distill::DistillConfig;
use offsite::eval::{perplexity, prepare_emulator};
use offsite::model::{NamedTensors, TransformerModel};
use offsite::surgery::{split, EmulatorSpec, SplitModel, SplitPlan};
use offsite::tuning::write_csv;
use offsite::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::paths::{display, read_bundle, read_json, write_bundle, write_json, Work};
use crate::{Global, Status};

#[derive(Subcommand)]
pub enum OwnerCmd {
    /// Write the base model checkpoint.
    Init {
        /// `bundled` (pinned toy base) or `pretrain`.
        #[arg(long, value_parser = ["bundled", "pretrain"])]
        base: Option<String>,
    },
    /// Fix which blocks form the adapter.
    Split {
        /// Bottom+top adapter blocks, e.g. 2+2.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Compress the middle blocks into an emulator.
    BuildEmulator {
        #[arg(long, value_parser = ["layer-drop", "distilled", "magnitude-prune", "quantize"])]
        method: Option<String>,
        /// Middle blocks kept by layer drop.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        bits: Option<u32>,
        /// Distillation steps for `--method distilled`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the layer-drop emulator against the original middle.
    Distill {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the package sent to the user.
    Package,
    /// Verify a returned adapter and plug it into the base model.
    PlugIn {
        /// Return bundle; defaults to exchange/return.otb.
        #[arg(long)]
        adapter: Option<std::path::PathBuf>,
    },
    /// Downstream perplexity of the base and plugged-in models.
    Eval {
        /// Downstream corpus (`bundled:<name>` or a path).
        #[arg(long)]
        data: Option<String>,
    },
}

impl OwnerCmd {
    pub fn name(&self) -> &'static str {
        match self {
            OwnerCmd::Init { .. } => "init",
            OwnerCmd::Split { .. } => "split",
            OwnerCmd::BuildEmulator { .. } => "build-emulator",
            OwnerCmd::Distill { .. } => "distill",
            OwnerCmd::Package => "package",
            OwnerCmd::PlugIn { .. } => "plug-in",
            OwnerCmd::Eval { .. } => "eval",
        }
    }
}

/// Contents of `owner/split.json`.
#[derive(Serialize, Deserialize)]
struct SplitRecord {
    plan: SplitPlan,
    n_layers: usize,
    middle_len: usize,
    adapter_indices: Vec<usize>,
    base_model_hash: String,
}

pub fn run(cmd: &OwnerCmd, g: &Global) -> Result<Status> {
    let cfg = g.run_config()?;
    let work = Work::new(&g.work_dir);
    match cmd {
        OwnerCmd::Init { base } => init(&work, cfg, base.as_deref()),
        OwnerCmd::Split { plan } => split_stage(&work, plan.as_deref().unwrap_or(&cfg.plan)),
        OwnerCmd::BuildEmulator {
            method,
            k,
            sparsity,
            bits,
            steps,
            seed,
        } => {
            let mut settings = cfg.emulator.clone();
            if let Some(m) = method {
                settings.method = m.clone();
            }
            settings.keep = k.unwrap_or(settings.keep);
            settings.sparsity = sparsity.unwrap_or(settings.sparsity);
            settings.bits = bits.unwrap_or(settings.bits);
            settings.distill_steps = steps.unwrap_or(settings.distill_steps);
            build_emulator(&work, &cfg, &settings, seed.unwrap_or(cfg.seeds[0]))
        }
        OwnerCmd::Distill { steps, seed } => distill(&work, &cfg, steps.unwrap_or(cfg.emulator.distill_steps), seed.unwrap_or(cfg.seeds[0])),
        OwnerCmd::Package => package(&work),
        OwnerCmd::PlugIn { adapter } => plug_in(&work, adapter.clone().unwrap_or_else(|| work.returned())),
        OwnerCmd::Eval { data } => eval(&work, &cfg, data.as_deref().unwrap_or(&cfg.downstream_corpus)),
    }
}

fn load_model(work: &Work) -> Result<TransformerModel<f32>> {
    load_checkpoint(&read_bundle(&work.model(), "owner init")?)
}

fn init(work: &Work, mut cfg: RunConfig, base: Option<&str>) -> Result<Status> {
    match base {
        Some("pretrain") => cfg.base = BaseSource::Pretrain,
        Some(_) => cfg.base = BaseSource::Bundled,
        None => {}
    }
    cfg.validate()?;
    let model = cfg.base_model()?;
    write_bundle(&work.model(), &save_checkpoint(&model))?;
    let mut s = Status::new();
    s.insert("model".into(), json!(display(&work.model())));
    s.insert("n_layers".into(), json!(model.config.n_layers));
    s.insert("d_model".into(), json!(model.config.d_model));
    s.insert("weights_hash".into(), json!(model.weights_hash()));
    Ok(s)
}

fn split_stage(work: &Work, plan: &str) -> Result<Status> {
    let model = load_model(work)?;
    let plan: SplitPlan = plan.parse()?;
    let s = split(&model, plan)?;
    let n = model.config.n_layers;
    let record = SplitRecord {
        plan,
        n_layers: n,
        middle_len: s.middle.len(),
        adapter_indices: plan.adapter_indices(n),
        base_model_hash: model.weights_hash(),
    };
    write_json(&work.split(), &record)?;
    let mut st = Status::new();
    st.insert("plan".into(), json!(plan.to_string()));
    st.insert("m".into(), json!(record.middle_len));
    st.insert("adapter_indices".into(), json!(record.adapter_indices));
    st.insert("split".into(), json!(display(&work.split())));
    Ok(st)
}

/// The model and its split as recorded by `owner split`.
fn load_split(work: &Work) -> Result<(TransformerModel<f32>, SplitModel<f32>)> {
    let model = load_model(work)?;
    let record: SplitRecord = read_json(&work.split(), "owner split")?;
    if record.base_model_hash != model.weights_hash() {
        return Err(Error::Provenance {
            fields: vec!["base_model_hash".into()],
        });
    }
    let s = split(&model, record.plan)?;
    Ok((model, s))
}

fn distill_config(cfg: &RunConfig, steps: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        steps,
        seed,
        warmup_steps: cfg.distill.warmup_steps.min(steps),
        ..cfg.distill
    }
}

fn emulator_status(work: &Work, s: &SplitModel<f32>, emu: &SplitModel<f32>, spec: &EmulatorSpec) -> Status {
    let mut st = Status::new();
    st.insert("method".into(), json!(spec.method()));
    match spec {
        EmulatorSpec::LayerDrop { plan } | EmulatorSpec::Distilled { plan, .. } => {
            st.insert("retained".into(), json!(plan.retained_indices));
        }
        _ => {}
    }
    st.insert("m".into(), json!(s.middle.len()));
    st.insert("emulator_blocks".into(), json!(emu.middle.len()));
    st.insert("emulator".into(), json!(display(&work.emulator())));
    st
}

fn build_emulator(work: &Work, cfg: &RunConfig, settings: &EmulatorSettings, seed: u64) -> Result<Status> {
    let (_, s) = load_split(work)?;
    let spec = settings.spec(s.middle.len())?;
    let emu = match &spec {
        EmulatorSpec::Distilled { steps, .. } => {
            let tokens = load_corpus(&cfg.pretrain_corpus)?.tokens;
            prepare_emulator(&s, &spec, &tokens, &distill_config(cfg, *steps, seed))?
        }
        other => s.emulate(other)?,
    };
    write_bundle(&work.emulator(), &package_owner(&s, &emu)?)?;
    Ok(emulator_status(work, &s, &emu, &spec))
}

/// Always restarts from the layer-drop blocks, so reruns give the same file.
fn distill(work: &Work, cfg: &RunConfig, steps: usize, seed: u64) -> Result<Status> {
    let (_, s) = load_split(work)?;
    let current = read_bundle(&work.emulator(), "owner build-emulator")?;
    let plan = match current.manifest.emulator_spec {
        Some(EmulatorSpec::LayerDrop { plan }) | Some(EmulatorSpec::Distilled { plan, .. }) => plan,
        _ => return Err(Error::Spec("distillation needs a layer-drop emulator".into())),
    };
    let spec = EmulatorSpec::Distilled { plan, steps };
    let tokens = load_corpus(&cfg.pretrain_corpus)?.tokens;
    let emu = prepare_emulator(&s, &spec, &tokens, &distill_config(cfg, steps, seed))?;
    write_bundle(&work.emulator(), &package_owner(&s, &emu)?)?;
    let mut st = emulator_status(work, &s, &emu, &spec);
    st.insert("steps".into(), json!(steps));
    Ok(st)
}

fn package(work: &Work) -> Result<Status> {
    let (_, s) = load_split(work)?;
    let built = read_bundle(&work.emulator(), "owner build-emulator")?;
    let emu = unpack_owner(&built)?;
    // Re-run the privacy checks against the original split.
    let bundle = package_owner(&s, &emu)?;
    write_bundle(&work.package(), &bundle)?;
    write_json(&work.issued(), &bundle.manifest.provenance)?;
    let mut st = Status::new();
    st.insert("package".into(), json!(display(&work.package())));
    st.insert("tensors".into(), json!(bundle.manifest.tensors.len()));
    st.insert("bytes".into(), json!(bundle.to_bytes().len()));
    st.insert("manifest_sha256".into(), json!(bundle.manifest_hash()));
    Ok(st)
}

fn plug_in(work: &Work, adapter: std::path::PathBuf) -> Result<Status> {
    let model = load_model(work)?;
    let issued: Provenance = read_json(&work.issued(), "owner package")?;
    let ret = read_bundle(&adapter, "user package-return")?;
    if ret.manifest.role != Role::AdapterReturn {
        return Err(Error::Format(format!("{} is not an adapter return bundle", adapter.display())));
    }
    let plugged = verify_and_plug(&model, &ret, &issued)?;
    write_bundle(&work.plugged(), &save_checkpoint(&plugged))?;
    let mut st = Status::new();
    st.insert("plugged".into(), json!(display(&work.plugged())));
    st.insert("weights_hash".into(), json!(plugged.weights_hash()));
    st.insert("identical_to_base".into(), json!(plugged.bit_eq(&model)));
    Ok(st)
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    weights_hash: String,
    tokens: usize,
    perplexity: f64,
}

fn eval(work: &Work, cfg: &RunConfig, data: &str) -> Result<Status> {
    let val = load_corpus(data)?.split(cfg.val_fraction)?.validation;
    let ft = &cfg.finetune;
    let mut rows = Vec::new();
    let mut models = vec![("base", load_model(work)?)];
    if work.plugged().is_file() {
        models.push(("plugged", load_checkpoint(&read_bundle(&work.plugged(), "owner plug-in")?)?));
    }
    for (name, m) in &models {
        let r = perplexity(m, &val, ft.seq_len, ft.batch_size)?;
        if !r.perplexity.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        rows.push(EvalRow {
            model: name.to_string(),
            weights_hash: m.weights_hash(),
            tokens: r.tokens,
            perplexity: r.perplexity,
        });
    }
    let path = cfg.reports_dir(&work.root).join("owner-eval.csv");
    write_csv(&path, &rows)?;
    let mut st = Status::new();
    for r in &rows {
        st.insert(format!("{}_ppl", r.model), json!(r.perplexity));
    }
    st.insert("report".into(), json!(display(&path)));
    Ok(st)
}

