//! `sweep`: run the full pipeline (gen-demos → pretrain → train) for a list
//! of seeds, each stage in its own child process so one config drives N
//! independent, individually reproducible runs.

use std::path::PathBuf;
use std::process::Command;

use stagerl::nn::checkpoint;

use crate::args::{build_config, single};
use crate::paths::{default_run_dir, demo_path, run_root};
use crate::{usage, CmdResult};

pub fn run(argline: &[String]) -> CmdResult {
    // Validate the shared config up front (minus sweep-only keys) so a typo
    // fails before the first child is spawned.
    let (_, extras) = build_config(argline, &["seeds", "name", "out"])?;
    let seeds_arg = match single(&extras, "seeds")? {
        Some(s) => s,
        None => return Err(usage("sweep requires seeds=N,N,... ")),
    };
    if single(&extras, "out")?.is_some() {
        return Err(usage("sweep derives each run dir itself; use name=PREFIX instead of out="));
    }
    let name = single(&extras, "name")?;
    let mut seeds = Vec::new();
    for part in seeds_arg.split(',') {
        let s: u64 = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("seeds: '{part}' is not an integer")))?;
        seeds.push(s);
    }
    if seeds.is_empty() {
        return Err(usage("seeds list is empty"));
    }

    let exe = std::env::current_exe().map_err(anyhow::Error::new)?;
    let forwarded: Vec<String> = argline
        .iter()
        .filter(|a| {
            let key = a.split('=').next().unwrap_or("");
            !matches!(key, "seeds" | "name")
        })
        .cloned()
        .collect();

    let mut results: Vec<(u64, PathBuf, f64)> = Vec::new();
    for &seed in &seeds {
        // Re-derive this seed's config to learn its default paths.
        let mut child_args = forwarded.clone();
        child_args.push(format!("seed={seed}"));
        let (child_cfg, _) = build_config(&child_args, &[])?;
        let out = match &name {
            Some(prefix) => run_root().join(format!("{prefix}-s{seed}")),
            None => default_run_dir(&child_cfg),
        };

        if child_cfg.demo_ratio > 0.0 || !child_cfg.no_pretrain {
            if !demo_path(&child_cfg).exists() {
                spawn(&exe, "gen-demos", &child_args, None, seed)?;
            }
        }
        if !child_cfg.no_pretrain {
            spawn(&exe, "pretrain", &child_args, Some(&out), seed)?;
        }
        spawn(&exe, "train", &child_args, Some(&out), seed)?;

        let final_ckpt = out.join("checkpoints").join("final.ckpt");
        let success = checkpoint::load(&final_ckpt)?
            .meta_value("final_success")
            .unwrap_or(f64::NAN);
        results.push((seed, out, success));
    }

    println!("sweep complete:");
    let mut sum = 0.0;
    for (seed, dir, success) in &results {
        println!("  seed {seed}: final success {success:.2} ({})", dir.display());
        sum += success;
    }
    println!("  mean final success: {:.3}", sum / results.len() as f64);
    Ok(())
}

fn spawn(
    exe: &PathBuf,
    command: &str,
    args: &[String],
    out: Option<&PathBuf>,
    seed: u64,
) -> CmdResult {
    let mut c = Command::new(exe);
    c.arg(command).args(args);
    if let Some(out) = out {
        c.arg(format!("out={}", out.display()));
    }
    let status = c.status().map_err(anyhow::Error::new)?;
    if !status.success() {
        return Err(anyhow::anyhow!(
            "child `{command}` for seed {seed} exited with {status}"
        )
        .into());
    }
    Ok(())
}
