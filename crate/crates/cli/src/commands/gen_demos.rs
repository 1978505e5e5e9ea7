//! `gen-demos`: roll the scripted expert until `demo_count` successful
//! episodes are on file, discarding failures, with at most 10x`demo_count`
//! attempts. Writes the trajectory file plus a manifest recording label
//! statistics and a content hash.

use std::fmt::Write as _;

use anyhow::Context;
use rand::RngCore;
use stagerl::data::{expert_rollout, save_trajectories, Source, Trajectory};
use stagerl::rng;

use crate::args::build_config;
use crate::paths::{demo_path, fnv64_file, manifest_path};
use crate::{usage, CmdResult};

pub fn run(argline: &[String]) -> CmdResult {
    let (cfg, _) = build_config(argline, &[])?;
    if cfg.demo_count == 0 {
        return Err(usage("demo_count = 0: demonstrations are required"));
    }
    let spec = cfg.resolved_env_spec()?;
    let path = demo_path(&cfg);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(anyhow::Error::new)?;
    }

    let mut seed_rng = rng::stream(cfg.seed, "demo-gen");
    let max_attempts = 10 * cfg.demo_count;
    let mut demos: Vec<Trajectory> = Vec::with_capacity(cfg.demo_count);
    let mut attempts = 0;
    while demos.len() < cfg.demo_count && attempts < max_attempts {
        attempts += 1;
        let traj = expert_rollout(&spec, seed_rng.next_u64(), Source::Demo)?;
        if traj.success {
            demos.push(traj);
        }
    }
    if demos.len() < cfg.demo_count {
        return Err(anyhow::anyhow!(
            "expert produced only {}/{} successes in {max_attempts} attempts on '{}'",
            demos.len(),
            cfg.demo_count,
            spec.name
        )
        .into());
    }

    save_trajectories(&path, &spec, &demos)?;

    // Manifest: label/reward statistics plus a hash of the file we just
    // wrote, so downstream runs can pin exactly which demos they used.
    let n = spec.n_stages as usize;
    let mut label_counts = vec![0usize; n + 1];
    let mut reward_counts = vec![0usize; n + 1];
    let mut steps = 0usize;
    for t in &demos {
        steps += t.rewards.len();
        for &l in &t.labels {
            label_counts[l as usize] += 1;
        }
        for &r in &t.rewards {
            reward_counts[r as usize] += 1;
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "env = {}", spec.name);
    let _ = writeln!(m, "granularity = {}", spec.stage_granularity);
    let _ = writeln!(m, "n_stages = {}", spec.n_stages);
    let _ = writeln!(m, "seed = {}", cfg.seed);
    let _ = writeln!(m, "count = {}", demos.len());
    let _ = writeln!(m, "attempts = {attempts}");
    let _ = writeln!(m, "steps = {steps}");
    let _ = writeln!(m, "label_counts = {}", join_counts(&label_counts));
    let _ = writeln!(m, "reward_counts = {}", join_counts(&reward_counts));
    let _ = writeln!(m, "file_fnv64 = {:016x}", fnv64_file(&path)?);
    let manifest = manifest_path(&path);
    std::fs::write(&manifest, m)
        .with_context(|| format!("writing manifest {}", manifest.display()))?;

    println!(
        "wrote {} demos ({} steps, {} attempts) to {} (manifest {})",
        demos.len(),
        steps,
        attempts,
        path.display(),
        manifest.display()
    );
    Ok(())
}

fn join_counts(counts: &[usize]) -> String {
    counts
        .iter()
        .enumerate()
        .map(|(k, c)| format!("{k}:{c}"))
        .collect::<Vec<_>>()
        .join(",")
}
