mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use difftap::config::RunConfig;

use args::{Cli, Command};

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Core(difftap::Error),
    /// Ran to completion but a check failed.
    Check(String),
}

impl From<difftap::Error> for Failure {
    fn from(e: difftap::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_validation() => 2,
            _ => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Check(m) => f.write_str(m),
        }
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve_config(cli: &Cli) -> difftap::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| difftap::Error::Config(format!("--set expects SECTION.KEY=VALUE, got `{item}`")))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(device) = &cli.device {
        cfg.run.device = device.clone();
    }
    match &cli.model_dir {
        Some(dir) => cfg.run.model_dir = dir.clone(),
        None => cfg.run.model_dir = cfg.model_dir(),
    }
    if let Some(store) = &cli.store {
        cfg.run.store_path = store.clone();
    }
    if let Some(out) = &cli.output_dir {
        cfg.run.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = resolve_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_ini_string());
        return Ok(());
    }
    match cli.command {
        Command::Extract(a) => commands::extract(&mut cfg, &a),
        Command::Pca(a) => commands::pca(&cfg, &a),
        Command::Delta(a) => commands::delta(&cfg, &a),
        Command::Cka(a) => commands::cka(&cfg, &a),
        Command::ItmEval(a) => commands::itm_eval(&mut cfg, &a),
        Command::LeakageProbe(a) => commands::leakage_probe(&mut cfg, &a),
        Command::FuseCheck(_) => commands::fuse_check(&cfg),
        Command::Store { action } => commands::store(&cfg, action),
        Command::Datasets { action } => commands::datasets(&cfg, action),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
