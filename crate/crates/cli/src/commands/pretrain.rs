//! `pretrain`: behavior-clone the encoder and policy on the demonstration
//! file, keeping the best-evaluating snapshot. Artifacts land in the run
//! directory: `checkpoints/bc.ckpt`, `bc_curve.csv` and the resolved config.

use std::path::PathBuf;

use stagerl::data::load_trajectories;
use stagerl::metrics::MetricsWriter;
use stagerl::nn::checkpoint;

use crate::args::{build_config, single};
use crate::build::build_bc;
use crate::paths::{default_run_dir, demo_path, prepare_run_dir};
use crate::CmdResult;

pub fn run(argline: &[String]) -> CmdResult {
    let (cfg, extras) = build_config(argline, &["out"])?;
    let out = single(&extras, "out")?.map(PathBuf::from).unwrap_or_else(|| default_run_dir(&cfg));
    let spec = cfg.resolved_env_spec()?;

    let demo_file = demo_path(&cfg);
    if !demo_file.exists() {
        return Err(anyhow::anyhow!(
            "missing demonstrations at {}; run `stagerl gen-demos` first",
            demo_file.display()
        )
        .into());
    }
    let demos = load_trajectories(&demo_file, &spec)?;

    prepare_run_dir(&out, &cfg).map_err(crate::Failure::Runtime)?;
    let (mut store, bc) = build_bc(&cfg, &spec).map_err(crate::Failure::Runtime)?;
    let report = stagerl::bc::pretrain(&mut store, &bc, &demos, &spec, &cfg.bc_config(), cfg.seed)?;

    let columns = vec!["step".to_string(), "success_rate".to_string()];
    let mut csv = MetricsWriter::create(&out.join("bc_curve.csv"), &columns)?;
    for p in &report.eval_curve {
        csv.write_row(&[p.step as f64, p.success])?;
    }
    csv.flush()?;

    checkpoint::save(
        &out.join("checkpoints").join("bc.ckpt"),
        &store,
        &[
            ("best_success".to_string(), report.best_success),
            ("best_step".to_string(), report.best_step as f64),
            ("steps_run".to_string(), report.steps_run as f64),
            ("eval_env_steps".to_string(), report.eval_env_steps as f64),
            ("seed".to_string(), cfg.seed as f64),
        ],
    )?;

    println!(
        "pretrained on {} demos: best eval success {:.2} at step {} \
         ({} optimizer steps, {} eval env steps) -> {}",
        demos.len(),
        report.best_success,
        report.best_step,
        report.steps_run,
        report.eval_env_steps,
        out.display()
    );
    Ok(())
}
