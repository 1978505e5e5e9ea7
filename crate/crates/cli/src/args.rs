//! `key=value` argument handling and flat config files.
//!
//! A config file is plain text: one `key = value` per line, `#` comments,
//! and `include <path>` lines that splice another file relative to the one
//! containing the directive. Assignments apply strictly in reading order,
//! so later lines (and later command-line pairs) override earlier ones.
//! Unknown keys are rejected wherever they appear.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stagerl::TrainConfig;

use crate::{usage, Failure};

const MAX_INCLUDE_DEPTH: usize = 16;

pub fn split_kv(arg: &str) -> Result<(&str, &str), Failure> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(usage(format!("argument '{arg}' is not of the form key=value"))),
    }
}

fn apply_file(cfg: &mut TrainConfig, path: &Path, depth: usize) -> Result<(), Failure> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(usage(format!(
            "config include depth exceeds {MAX_INCLUDE_DEPTH} at {}; include cycle?",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(included) = line.strip_prefix("include ") {
            apply_file(cfg, &dir.join(included.trim()), depth + 1)?;
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            usage(format!("{}:{}: expected key = value, got '{line}'", path.display(), lineno + 1))
        })?;
        cfg.set(k.trim(), v.trim()).map_err(|e| {
            usage(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
    }
    Ok(())
}

/// Assemble a validated config from command-line pairs. `config=FILE` pairs
/// load files; keys named in `reserved` are collected for the caller
/// instead of being interpreted as config assignments (repeats allowed).
pub fn build_config(
    argline: &[String],
    reserved: &[&str],
) -> Result<(TrainConfig, BTreeMap<String, Vec<String>>), Failure> {
    let mut cfg = TrainConfig::default();
    let mut extras: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for arg in argline {
        let (k, v) = split_kv(arg)?;
        if k == "config" {
            apply_file(&mut cfg, &PathBuf::from(v), 0)?;
        } else if reserved.contains(&k) {
            extras.entry(k.to_string()).or_default().push(v.to_string());
        } else {
            cfg.set(k, v).map_err(|e| usage(format!("{e}")))?;
        }
    }
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok((cfg, extras))
}

/// The single optional value for a reserved key; an error if repeated.
pub fn single(
    extras: &BTreeMap<String, Vec<String>>,
    key: &str,
) -> Result<Option<String>, Failure> {
    match extras.get(key).map(Vec::as_slice) {
        None => Ok(None),
        Some([one]) => Ok(Some(one.clone())),
        Some(_) => Err(usage(format!("key '{key}' given more than once"))),
    }
}
