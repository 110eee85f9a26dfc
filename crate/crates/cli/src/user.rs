use std::path::{Path, PathBuf};

use clap::Subcommand;
use offsite::artifact::{apply_return, package_return, unpack_owner, Role};
use offsite::config::{load_corpus, RunConfig};
use offsite::data::CorpusSplit;
use offsite::eval::perplexity;
use offsite::surgery::SplitModel;
use offsite::tuning::{finetune, write_csv, FinetuneConfig, SWEEP_LR_GRID};
use offsite::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::paths::{display, read_user_bundle, write_bundle, Work};
use crate::{Global, Status};

#[derive(Subcommand)]
pub enum UserCmd {
    /// Tune the adapter against the emulator on the downstream data.
    Finetune {
        /// Owner package; defaults to exchange/package.otb.
        #[arg(long)]
        package: Option<PathBuf>,
        /// Downstream corpus (`bundled:<name>` or a path).
        #[arg(long)]
        data: Option<String>,
        /// `default` for the five-point sweep, or comma-separated rates.
        #[arg(long, value_parser = parse_lr_grid)]
        lr_grid: Option<LrGrid>,
        /// Total optimizer steps per run, in one epoch.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Tuned adapter bundle; defaults to user/tuned.otb.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emulator perplexity on the downstream validation split.
    Eval {
        #[arg(long)]
        package: Option<PathBuf>,
        /// Tuned adapter to evaluate; without it the received adapter is used.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        data: Option<String>,
    },
    /// Check the tuned adapter against the package and place it for return.
    PackageReturn {
        #[arg(long)]
        package: Option<PathBuf>,
        /// Tuned adapter; defaults to user/tuned.otb.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Defaults to exchange/return.otb.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl UserCmd {
    pub fn name(&self) -> &'static str {
        match self {
            UserCmd::Finetune { .. } => "finetune",
            UserCmd::Eval { .. } => "eval",
            UserCmd::PackageReturn { .. } => "package-return",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LrGrid(Vec<f64>);

fn parse_lr_grid(s: &str) -> std::result::Result<LrGrid, String> {
    if s == "default" {
        return Ok(LrGrid(SWEEP_LR_GRID.to_vec()));
    }
    let grid = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
        return Err("learning rates must be positive".into());
    }
    Ok(LrGrid(grid))
}

pub fn run(cmd: &UserCmd, g: &Global) -> Result<Status> {
    let cfg = g.run_config()?;
    let work = Work::new(&g.work_dir);
    let package_path = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| work.package());
    match cmd {
        UserCmd::Finetune {
            package,
            data,
            lr_grid,
            steps,
            seed,
            out,
        } => {
            let mut ft = FinetuneConfig {
                seed: seed.unwrap_or(cfg.seeds[0]),
                ..cfg.finetune.clone()
            };
            if let Some(LrGrid(grid)) = lr_grid {
                ft.lr_grid = grid.clone();
            }
            if let Some(n) = *steps {
                ft.epochs = 1;
                ft.steps_per_epoch = n;
                ft.warmup_steps = ft.warmup_steps.min(n);
            }
            let out = out.clone().unwrap_or_else(|| work.tuned());
            user_finetune(&package_path(package), &downstream(&cfg, data)?, &ft, &out)
        }
        UserCmd::Eval { package, adapter, data } => user_eval(&work, &cfg, &package_path(package), adapter.as_deref(), &downstream(&cfg, data)?),
        UserCmd::PackageReturn { package, adapter, out } => package_return_stage(
            &package_path(package),
            &adapter.clone().unwrap_or_else(|| work.tuned()),
            &out.clone().unwrap_or_else(|| work.returned()),
        ),
    }
}

fn downstream(cfg: &RunConfig, data: &Option<String>) -> Result<CorpusSplit> {
    load_corpus(data.as_deref().unwrap_or(&cfg.downstream_corpus))?.split(cfg.val_fraction)
}

fn load_package(path: &Path) -> Result<SplitModel<f32>> {
    unpack_owner(&read_user_bundle(path, Role::OwnerPackage)?)
}

fn finite(ppl: f64) -> Result<f64> {
    if ppl.is_finite() {
        Ok(ppl)
    } else {
        Err(Error::NonFiniteLoss { step: 0 })
    }
}

fn user_finetune(package: &Path, data: &CorpusSplit, ft: &FinetuneConfig, out: &Path) -> Result<Status> {
    let emu = load_package(package)?;
    let tuned = finetune(&emu, &data.train, &data.validation, ft)?;
    let val = perplexity(&tuned.model, &data.validation, ft.seq_len, ft.batch_size)?;
    finite(val.perplexity)?;
    write_bundle(out, &package_return(&tuned.model.adapter)?)?;
    let log = out.with_file_name("finetune-log.csv");
    write_csv(&log, &tuned.log)?;
    let mut st = Status::new();
    st.insert("runs".into(), json!(ft.lr_grid.len()));
    st.insert("steps".into(), json!(ft.total_steps()));
    st.insert("best_lr".into(), json!(tuned.best_lr));
    st.insert("emulator_ppl".into(), json!(val.perplexity));
    st.insert("adapter".into(), json!(display(out)));
    st.insert("log".into(), json!(display(&log)));
    Ok(st)
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    tokens: usize,
    perplexity: f64,
}

fn user_eval(work: &Work, cfg: &RunConfig, package: &Path, adapter: Option<&Path>, data: &CorpusSplit) -> Result<Status> {
    let mut emu = load_package(package)?;
    let mut label = "emulator".to_string();
    if let Some(a) = adapter {
        emu = apply_return(&emu, &read_user_bundle(a, Role::AdapterReturn)?)?;
        label = "emulator+tuned-adapter".into();
    }
    let ft = &cfg.finetune;
    let r = perplexity(&emu, &data.validation, ft.seq_len, ft.batch_size)?;
    finite(r.perplexity)?;
    let path = cfg.reports_dir(&work.root).join("user-eval.csv");
    write_csv(
        &path,
        &[EvalRow {
            model: label.clone(),
            tokens: r.tokens,
            perplexity: r.perplexity,
        }],
    )?;
    let mut st = Status::new();
    st.insert("model".into(), json!(label));
    st.insert("emulator_ppl".into(), json!(r.perplexity));
    st.insert("report".into(), json!(display(&path)));
    Ok(st)
}

fn package_return_stage(package: &Path, adapter: &Path, out: &Path) -> Result<Status> {
    let emu = load_package(package)?;
    let tuned = apply_return(&emu, &read_user_bundle(adapter, Role::AdapterReturn)?)?;
    let bundle = package_return(&tuned.adapter)?;
    write_bundle(out, &bundle)?;
    let mut st = Status::new();
    st.insert("return".into(), json!(display(out)));
    st.insert("tensors".into(), json!(bundle.manifest.tensors.len()));
    st.insert("manifest_sha256".into(), json!(bundle.manifest_hash()));
    Ok(st)
}
