//! `eval`: re-run the greedy evaluation of a finished run from its stored
//! artifacts alone. With the stored seeds and stream tag this reproduces
//! the training log's final evaluation bit-for-bit, which doubles as an
//! integrity check on the checkpoint.

use std::path::PathBuf;

use rand::RngCore;
use stagerl::metrics::MetricsWriter;
use stagerl::nn::checkpoint;
use stagerl::rng;
use stagerl::trainer::evaluate_planner;

use crate::args::{single, split_kv};
use crate::build::build_models;
use crate::paths::load_run_config;
use crate::{usage, CmdResult};

pub fn run(argline: &[String]) -> CmdResult {
    let mut extras = std::collections::BTreeMap::<String, Vec<String>>::new();
    for arg in argline {
        let (k, v) = split_kv(arg)?;
        match k {
            "run" | "ckpt" | "episodes" => {
                extras.entry(k.to_string()).or_default().push(v.to_string())
            }
            other => return Err(usage(format!("eval does not accept key '{other}'"))),
        };
    }
    let run_dir = match single(&extras, "run")? {
        Some(d) => PathBuf::from(d),
        None => return Err(usage("eval requires run=DIR")),
    };
    let cfg = load_run_config(&run_dir).map_err(crate::Failure::Runtime)?;
    let spec = cfg.resolved_env_spec()?;

    let ckpt_path = match single(&extras, "ckpt")? {
        Some(p) => run_dir.join("checkpoints").join(p),
        None => run_dir.join("checkpoints").join("final.ckpt"),
    };
    if !ckpt_path.exists() {
        return Err(anyhow::anyhow!(
            "missing checkpoint {}; run `stagerl train` first",
            ckpt_path.display()
        )
        .into());
    }
    let episodes = match single(&extras, "episodes")? {
        Some(e) => e
            .parse::<usize>()
            .map_err(|_| usage(format!("episodes='{e}' is not a number")))?,
        None => cfg.eval_episodes,
    };
    if episodes == 0 {
        return Err(usage("episodes must be positive"));
    }

    let mut models = build_models(&cfg, &spec).map_err(crate::Failure::Runtime)?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    ckpt.apply_to(&mut models.store)?;
    let eval_tag = ckpt.meta_value("eval_tag").unwrap_or(0.0) as u64;

    let mut seed_rng = rng::stream(cfg.seed, "eval-seeds");
    let seeds: Vec<u64> = (0..episodes).map(|_| seed_rng.next_u64()).collect();
    let report = evaluate_planner(
        &spec,
        &models.store,
        &models.wm,
        models.bank.as_ref(),
        cfg.beta,
        &cfg.plan_config(),
        &seeds,
        eval_tag,
        cfg.seed,
    )?;

    let mut columns = vec![
        "success_rate".to_string(),
        "mean_return_sparse".to_string(),
        "mean_return_dense".to_string(),
    ];
    for k in 0..report.histogram.len() {
        columns.push(format!("episodes_at_stage_{k}"));
    }
    let mut row = vec![report.success_rate, report.mean_return_sparse, report.mean_return_dense];
    row.extend(report.histogram.iter().map(|&c| c as f64));
    let mut csv = MetricsWriter::create(&run_dir.join("eval_report.csv"), &columns)?;
    csv.write_row(&row)?;
    csv.flush()?;

    println!(
        "eval of {}: success {:.4}, histogram {:?}, sparse return {:.3}, dense return {:.3}",
        ckpt_path.display(),
        report.success_rate,
        report.histogram,
        report.mean_return_sparse,
        report.mean_return_dense
    );
    if episodes == cfg.eval_episodes {
        if let Some(logged) = ckpt.meta_value("final_success") {
            if logged == report.success_rate {
                println!("matches the training log's final evaluation exactly");
            } else {
                return Err(anyhow::anyhow!(
                    "evaluation disagrees with the training log: logged {logged}, got {}",
                    report.success_rate
                )
                .into());
            }
        }
    }
    Ok(())
}
