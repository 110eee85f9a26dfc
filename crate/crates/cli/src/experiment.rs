use clap::Subcommand;
use offsite::accounting::count_params;
use offsite::config::{load_corpus, RunConfig};
use offsite::eval::{ablation_points, ablation_row, four_metrics, summarize, write_ablation_report, AblationAxis, PipelineData};
use offsite::model::ModelConfig;
use offsite::surgery::SplitPlan;
use offsite::tuning::{write_csv, PeftMode};
use offsite::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::paths::display;
use crate::{Global, Status};

#[derive(Subcommand)]
pub enum ExperimentCmd {
    /// Zero-shot, emulator, plug-in and full fine-tuning perplexity per seed.
    FourMetrics {
        /// Overrides `seeds` from the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// One ablation grid over all seeds.
    Ablation {
        #[arg(long, value_parser = ["adapter-position", "compression-method", "distillation"])]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Trainable and transmitted parameter counts, from shapes alone.
    Accounting {
        #[arg(long, value_parser = ["toy", "gpt2-xl", "opt-1.3b"])]
        preset: Option<String>,
        #[arg(long)]
        plan: Option<String>,
    },
}

impl ExperimentCmd {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentCmd::FourMetrics { .. } => "four-metrics",
            ExperimentCmd::Ablation { .. } => "ablation",
            ExperimentCmd::Accounting { .. } => "accounting",
        }
    }
}

pub fn run(cmd: &ExperimentCmd, g: &Global) -> Result<Status> {
    let mut cfg = g.run_config()?;
    let reports = cfg.reports_dir(&g.work_dir);
    match cmd {
        ExperimentCmd::FourMetrics { seeds } => {
            if let Some(s) = seeds {
                cfg.seeds = s.clone();
            }
            cfg.validate()?;
            run_four_metrics(&cfg, &reports)
        }
        ExperimentCmd::Ablation { axis, seeds } => {
            if let Some(s) = seeds {
                cfg.seeds = s.clone();
            }
            cfg.validate()?;
            run_ablation(&cfg, axis, &reports)
        }
        ExperimentCmd::Accounting { preset, plan } => accounting(
            preset.as_deref().unwrap_or(&cfg.preset),
            plan.as_deref().unwrap_or(&cfg.plan),
            &reports,
        ),
    }
}

/// A failed pipeline stage only survives as text in the report.
fn stage_failure(msg: &str) -> Error {
    if msg.starts_with("non-finite") {
        Error::NonFiniteLoss { step: 0 }
    } else {
        Error::Contract(msg.to_string())
    }
}

struct Inputs {
    base: offsite::model::TransformerModel<f32>,
    pretrain: Vec<u32>,
    downstream: offsite::data::CorpusSplit,
}

fn inputs(cfg: &RunConfig) -> Result<Inputs> {
    Ok(Inputs {
        base: cfg.base_model()?,
        pretrain: load_corpus(&cfg.pretrain_corpus)?.tokens,
        downstream: load_corpus(&cfg.downstream_corpus)?.split(cfg.val_fraction)?,
    })
}

fn run_four_metrics(cfg: &RunConfig, reports: &std::path::Path) -> Result<Status> {
    let inp = inputs(cfg)?;
    let data = PipelineData {
        downstream: &inp.downstream,
        distill_tokens: &inp.pretrain,
    };
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let rec = four_metrics(&inp.base, seed, &cfg.pipeline(seed)?, &data);
        log::info!("seed {seed}: {rec:?}");
        records.push(rec);
    }
    let path = reports.join("four-metrics.csv");
    write_csv(&path, &records)?;
    if let Some(f) = records.iter().find_map(|r| r.failure.as_deref()) {
        return Err(stage_failure(f));
    }
    let ordered = records.iter().all(|r| match (r.zero_shot_ppl, r.emulator_ppl, r.plug_in_ppl, r.full_ft_ppl) {
        (Some(z), Some(e), Some(p), Some(f)) => p < z && e > p && p <= 1.10 * f,
        _ => false,
    });
    let mut st = Status::new();
    st.insert("seeds".into(), json!(cfg.seeds));
    st.insert("plug_in_ppl".into(), json!(records.iter().map(|r| r.plug_in_ppl).collect::<Vec<_>>()));
    st.insert("orderings_hold".into(), json!(ordered));
    st.insert("report".into(), json!(display(&path)));
    Ok(st)
}

fn run_ablation(cfg: &RunConfig, axis_name: &str, reports: &std::path::Path) -> Result<Status> {
    let axis: AblationAxis = axis_name.parse()?;
    let inp = inputs(cfg)?;
    let data = PipelineData {
        downstream: &inp.downstream,
        distill_tokens: &inp.pretrain,
    };
    let points = ablation_points(axis, inp.base.config.n_layers, &cfg.pipeline(cfg.seeds[0])?)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pc = cfg.pipeline(seed)?;
        for p in &points {
            rows.push(ablation_row(axis, p, &inp.base, seed, &pc, &data));
        }
    }
    let summary = summarize(&points, &rows);
    write_ablation_report(reports, axis_name, &rows, &summary)?;
    if let Some(f) = rows.iter().find_map(|r| r.failure.as_deref()) {
        return Err(stage_failure(f));
    }
    let mut st = Status::new();
    st.insert("axis".into(), json!(axis_name));
    st.insert("points".into(), json!(points.len()));
    for s in &summary {
        st.insert(format!("{}_mean_plug_in_ppl", s.point), json!(s.mean_plug_in_ppl));
    }
    st.insert("report".into(), json!(display(&reports.join(format!("ablation-{axis_name}.csv")))));
    Ok(st)
}

#[derive(Serialize)]
struct AccountingRow {
    setting: String,
    total_params: usize,
    trainable_params: usize,
    transmitted_params: usize,
    transmitted_bytes: usize,
}

fn accounting(preset: &str, plan: &str, reports: &std::path::Path) -> Result<Status> {
    let cfg = ModelConfig::preset(preset)?;
    let plan: SplitPlan = plan.parse()?;
    plan.validate(cfg.n_layers)?;
    let settings = [
        ("full-finetune", None, PeftMode::Full),
        ("offsite", Some(plan), PeftMode::Full),
        ("offsite+lora", Some(plan), PeftMode::Lora { rank: 4, alpha: 4.0 }),
        ("offsite+adapter", Some(plan), PeftMode::Bottleneck { width: 64 }),
        ("offsite+bitfit", Some(plan), PeftMode::Bitfit),
    ];
    let mut rows = Vec::new();
    for (name, p, mode) in settings {
        let r = count_params(&cfg, p, mode)?;
        rows.push(AccountingRow {
            setting: name.into(),
            total_params: r.total_params,
            trainable_params: r.trainable_params,
            transmitted_params: r.transmitted_params,
            transmitted_bytes: r.transmitted_bytes,
        });
    }
    let path = reports.join(format!("accounting-{preset}-{plan}.csv"));
    write_csv(&path, &rows)?;
    let mut st = Status::new();
    st.insert("preset".into(), json!(preset));
    st.insert("plan".into(), json!(plan.to_string()));
    for r in &rows {
        st.insert(format!("{}_trainable", r.setting), json!(r.trainable_params));
    }
    st.insert("report".into(), json!(display(&path)));
    Ok(st)
}
