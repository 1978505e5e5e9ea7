//! Run-directory and demo-file conventions.
//!
//! Everything lands under one run root (`./runs` by default, overridable
//! with `STAGERL_RUN_ROOT`). A run directory holds the resolved config,
//! the demo manifest hash, `checkpoints/`, `metrics.csv` and `plots/`, so
//! one directory is one reproducible experiment.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use stagerl::TrainConfig;

pub const RUN_ROOT_ENV: &str = "STAGERL_RUN_ROOT";

pub fn run_root() -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

fn slug(cfg: &TrainConfig) -> String {
    let mut s = cfg.env.clone();
    if cfg.granularity != 0 {
        s.push_str(&format!("-g{}", cfg.granularity));
    }
    s
}

/// Where demonstrations live when `demo_path` is left empty.
pub fn demo_path(cfg: &TrainConfig) -> PathBuf {
    if cfg.demo_path.is_empty() {
        run_root()
            .join("demos")
            .join(format!("{}-n{}-s{}.traj", slug(cfg), cfg.demo_count, cfg.seed))
    } else {
        PathBuf::from(&cfg.demo_path)
    }
}

pub fn manifest_path(demo_file: &Path) -> PathBuf {
    let mut name = demo_file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    demo_file.with_file_name(name)
}

/// Default run directory: env slug, ablation tags, seed.
pub fn default_run_dir(cfg: &TrainConfig) -> PathBuf {
    let mut name = slug(cfg);
    if cfg.no_learned_reward {
        name.push_str("-noreward");
    }
    if cfg.no_pretrain {
        name.push_str("-nopretrain");
    }
    name.push_str(&format!("-s{}", cfg.seed));
    run_root().join(name)
}

/// FNV-1a over a file's bytes; stable fingerprint for manifests.
pub fn fnv64_file(path: &Path) -> Result<u64> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

/// Create the run directory skeleton and store the resolved config.
pub fn prepare_run_dir(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::write(dir.join("config"), cfg.to_flat())
        .with_context(|| format!("writing resolved config into {}", dir.display()))?;
    Ok(())
}

/// Load the resolved config stored in a run directory.
pub fn load_run_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join("config");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("no resolved config at {}", path.display()))?;
    let mut cfg = TrainConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: malformed line", path.display(), lineno + 1))?;
        cfg.set(k.trim(), v.trim())
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
    }
    cfg.validate().context("stored run config no longer validates")?;
    Ok(cfg)
}
