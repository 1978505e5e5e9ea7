//! `train`: the planning/densification phase. Loads demonstrations (unless
//! sampling is fully off-demo), warm-starts the encoder and policy from the
//! cloning checkpoint (unless ablated), and hands everything to the phase-2
//! loop, which emits `metrics.csv` and `checkpoints/` into the run dir.

use std::fmt::Write as _;
use std::path::PathBuf;

use stagerl::bc::transfer_into;
use stagerl::data::{load_trajectories, ReplayStore};
use stagerl::nn::checkpoint;
use stagerl::trainer::{run_phase2, Phase2Config, Phase2Session};

use crate::args::{build_config, single};
use crate::build::{build_bc, build_models};
use crate::paths::{default_run_dir, demo_path, fnv64_file, prepare_run_dir};
use crate::CmdResult;

pub fn run(argline: &[String]) -> CmdResult {
    let (cfg, extras) = build_config(argline, &["out"])?;
    let out = single(&extras, "out")?.map(PathBuf::from).unwrap_or_else(|| default_run_dir(&cfg));
    let spec = cfg.resolved_env_spec()?;
    prepare_run_dir(&out, &cfg).map_err(crate::Failure::Runtime)?;

    // Demonstrations. A demo_ratio of zero (backbone ablation) trains from
    // rollouts alone and tolerates a missing file.
    let demo_file = demo_path(&cfg);
    let mut replay = ReplayStore::new(cfg.capacity_steps);
    let mut demo_note = String::from("demos = none\n");
    if demo_file.exists() {
        let demos = load_trajectories(&demo_file, &spec)?;
        let count = demos.len();
        replay.set_demos(demos)?;
        demo_note = format!(
            "demos = {}\ncount = {}\nfile_fnv64 = {:016x}\n",
            demo_file.display(),
            count,
            fnv64_file(&demo_file).map_err(crate::Failure::Runtime)?
        );
    } else if cfg.demo_ratio > 0.0 {
        return Err(anyhow::anyhow!(
            "missing demonstrations at {} (demo_ratio = {}); run `stagerl gen-demos` \
             first or set demo_ratio=0",
            demo_file.display(),
            cfg.demo_ratio
        )
        .into());
    }
    std::fs::write(out.join("demos.manifest"), demo_note).map_err(anyhow::Error::new)?;

    let mut models = build_models(&cfg, &spec).map_err(crate::Failure::Runtime)?;

    // Warm start from phase 1 and keep the frozen clone for rollouts.
    let bc_slot = if cfg.no_pretrain {
        None
    } else {
        let bc_ckpt = out.join("checkpoints").join("bc.ckpt");
        if !bc_ckpt.exists() {
            return Err(anyhow::anyhow!(
                "missing pretraining checkpoint {}; run `stagerl pretrain` first \
                 or set no_pretrain=true",
                bc_ckpt.display()
            )
            .into());
        }
        let (mut bc_store, bc) = build_bc(&cfg, &spec).map_err(crate::Failure::Runtime)?;
        checkpoint::load(&bc_ckpt)?.apply_to(&mut bc_store)?;
        transfer_into(&mut models.store, &bc_store, &bc)?;
        Some((bc_store, bc))
    };

    let phase2 = Phase2Config::from_train_config(&cfg);
    let report = run_phase2(
        Phase2Session {
            spec: &spec,
            store: &mut models.store,
            wm: &models.wm,
            bank: models.bank.as_ref(),
            bc: bc_slot.as_ref().map(|(s, b)| (s, b)),
            replay: &mut replay,
        },
        &phase2,
        &out,
    )?;

    let mut curve = String::new();
    for e in &report.evals {
        let _ = write!(curve, " {}:{:.2}", e.step, e.success_rate);
    }
    println!(
        "trained {} steps / {} episodes / {} updates; final success {:.2} \
         (histogram {:?}); eval curve{} -> {}",
        report.budget.used,
        report.budget.episodes,
        report.budget.updates,
        report.final_success,
        report.final_histogram,
        curve,
        out.display()
    );
    if report.bc_hash_before != report.bc_hash_after {
        return Err(anyhow::anyhow!("frozen cloning policy changed during training").into());
    }
    Ok(())
}
