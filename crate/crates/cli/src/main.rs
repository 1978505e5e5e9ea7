//! Experiment driver. One command per process; every argument after the
//! subcommand is a `key=value` pair, where `config=FILE` loads a flat
//! key=value file (with `include` support) and later assignments override
//! earlier ones.

mod args;
mod build;
mod commands;
mod paths;
mod svg;

use std::process::ExitCode;

const USAGE: &str = "\
usage: stagerl <command> [key=value ...]

commands:
  gen-demos   roll the scripted expert until `demo_count` successes are
              collected; write the trajectory file and its manifest
  pretrain    behavior-clone encoder and policy on the demonstrations;
              writes checkpoints/bc.ckpt and bc_curve.csv into the run dir
  train       run the planning/densification phase; writes metrics.csv,
              checkpoints/ and a resolved config snapshot
  eval        re-evaluate a finished run's checkpoint on the stored seeds
  plot        render success curves (multi-run mean with 95% band) to SVG
  sweep       run the full pipeline for several seeds in child processes

common keys: config=FILE, out=DIR, plus every training config key
(seed=, env=, budget_steps=, ...). The run root defaults to ./runs and can
be overridden with the STAGERL_RUN_ROOT environment variable.";

/// Command outcomes map to the process exit code: domain failures keep
/// their message, usage problems additionally print the help text.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: unknown command/key, unparseable value or config.
    Usage(String),
    /// The command was well-formed but failed while running.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<stagerl::Error> for Failure {
    fn from(e: stagerl::Error) -> Self {
        Failure::Runtime(anyhow::Error::new(e))
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub type CmdResult = Result<(), Failure>;

fn dispatch(cmd: &str, rest: &[String]) -> CmdResult {
    match cmd {
        "gen-demos" => commands::gen_demos::run(rest),
        "pretrain" => commands::pretrain::run(rest),
        "train" => commands::train::run(rest),
        "eval" => commands::eval::run(rest),
        "plot" => commands::plot::run(rest),
        "sweep" => commands::sweep::run(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(usage(format!("unknown command '{other}'"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some((cmd, rest)) = argv.split_first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(1);
    };
    match dispatch(cmd, rest) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!();
            eprintln!("{USAGE}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
