//! `offsite`: owner, user and experiment commands over one work directory.

mod experiment;
mod owner;
mod paths;
mod user;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use offsite::config::RunConfig;
use offsite::Error;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "offsite", version, about = "Offsite fine-tuning between a model owner and a data owner")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Global {
    /// Directory holding the artifacts of every stage.
    #[arg(long, global = true, env = "OFFSITE_WORK_DIR", default_value = ".")]
    pub work_dir: PathBuf,
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

impl Global {
    pub fn run_config(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => {
                let dir = p.parent().map(PathBuf::from).unwrap_or_default();
                Ok(RunConfig::load(p)?.resolve(&dir))
            }
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Model-owner stages.
    #[command(subcommand)]
    Owner(owner::OwnerCmd),
    /// Data-owner stages. These read bundles only.
    #[command(subcommand)]
    User(user::UserCmd),
    /// Experiment drivers writing CSV reports.
    #[command(subcommand)]
    Experiment(experiment::ExperimentCmd),
}

/// Fields of a successful stage, printed as one JSON line.
pub type Status = Map<String, Value>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (stage, result) = match &cli.command {
        Command::Owner(c) => (format!("owner {}", c.name()), owner::run(c, &cli.global)),
        Command::User(c) => (format!("user {}", c.name()), user::run(c, &cli.global)),
        Command::Experiment(c) => (format!("experiment {}", c.name()), experiment::run(c, &cli.global)),
    };
    match result {
        Ok(fields) => {
            let mut line = Map::new();
            line.insert("stage".into(), json!(stage));
            line.insert("status".into(), json!("ok"));
            line.extend(fields);
            println!("{}", Value::Object(line));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            println!("{}", json!({"stage": stage, "status": "error", "exit_code": code, "error": e.to_string()}));
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
