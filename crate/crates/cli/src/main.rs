//! `rpf`: residual power flow data generation, training, evaluation and
//! power-system operation tasks.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unreadable input
//! files or config), 2 on runtime failures.

mod config;
mod data;
mod eval;
mod ops;
mod svg;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ConfigFile, Context, GlobalArgs, Globals, UsageError};

#[derive(Debug, Parser)]
#[command(name = "rpf", version, about = "Residual power flow toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training and test datasets.
    Gen(data::GenArgs),
    /// Train a neural or linear solver.
    Train(data::TrainArgs),
    /// Evaluate trained solvers on the test sets.
    Eval(eval::EvalArgs),
    /// Slack recovery: find the slack setpoint that makes each OC feasible.
    Pf(ops::PfArgs),
    /// Quasi-steady-state frequency under generator droop.
    Qss(ops::QssArgs),
    /// Optimal power flow over selected decision controls.
    Opf(ops::OpfArgs),
    /// Export network structure and angle-versus-power data.
    Export(data::ExportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Pf(_) => "pf",
            Command::Qss(_) => "qss",
            Command::Opf(_) => "opf",
            Command::Export(_) => "export",
        }
    }
}

/// Merges the command's flags with the config file, then either prints the
/// resolved options or runs the command.
fn dispatch<T>(cli: &Cli, file: &ConfigFile, args: &T, run: impl FnOnce(&Context, T) -> Result<()>) -> Result<()>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let name = cli.command.name();
    let globals = Globals::resolve(&cli.global, file)?;
    let merged: T = file.merge(args, name)?;
    if cli.global.print_config {
        let resolved = serde_json::json!({ "command": name, "global": globals, "options": merged });
        println!("{}", serde_json::to_string_pretty(&resolved)?);
        return Ok(());
    }
    if let Some(threads) = globals.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    let ctx = Context::new(globals)?;
    run(&ctx, merged)
}

fn run(cli: &Cli) -> Result<()> {
    let file = ConfigFile::load(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => dispatch(cli, &file, a, data::gen),
        Command::Train(a) => dispatch(cli, &file, a, data::train),
        Command::Eval(a) => dispatch(cli, &file, a, eval::eval),
        Command::Pf(a) => dispatch(cli, &file, a, ops::pf),
        Command::Qss(a) => dispatch(cli, &file, a, ops::qss),
        Command::Opf(a) => dispatch(cli, &file, a, ops::opf),
        Command::Export(a) => dispatch(cli, &file, a, data::export),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
