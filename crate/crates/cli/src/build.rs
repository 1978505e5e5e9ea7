//! Model construction shared by `train` and `eval`. The construction order
//! and rng streams are fixed so that a checkpoint saved by one command
//! applies cleanly to a store rebuilt by another.

use anyhow::{Context, Result};
use stagerl::bc::BcPolicy;
use stagerl::envs::EnvSpec;
use stagerl::nn::params::ParamStore;
use stagerl::rewardlearn::DiscriminatorBank;
use stagerl::rng;
use stagerl::worldmodel::WorldModel;
use stagerl::TrainConfig;

pub struct Models {
    pub store: ParamStore,
    pub wm: WorldModel,
    pub bank: Option<DiscriminatorBank>,
}

/// World model plus (unless ablated) the discriminator bank, freshly
/// initialized from the config seed.
pub fn build_models(cfg: &TrainConfig, spec: &EnvSpec) -> Result<Models> {
    let mut store = ParamStore::new();
    let wm_cfg = cfg.wm_config(spec)?;
    let mut r = rng::stream(cfg.seed, "wm-init");
    let wm = WorldModel::new(&mut store, wm_cfg, &mut r).context("building world model")?;
    let bank = if cfg.no_learned_reward {
        None
    } else {
        let mut rd = rng::stream(cfg.seed, "disc-init");
        Some(
            DiscriminatorBank::new(&mut store, &mut rd, cfg.latent_dim, spec.n_stages, cfg.disc_hidden)
                .context("building discriminator bank")?,
        )
    };
    Ok(Models { store, wm, bank })
}

/// Cloning network in its own store, shaped to match the world model's
/// encoder and policy so weights transfer by name.
pub fn build_bc(cfg: &TrainConfig, spec: &EnvSpec) -> Result<(ParamStore, BcPolicy)> {
    let mut store = ParamStore::new();
    let wm_cfg = cfg.wm_config(spec)?;
    let mut r = rng::stream(cfg.seed, "bc-init");
    let bc = BcPolicy::new(&mut store, &wm_cfg, cfg.bc_config().log_std, &mut r)
        .context("building cloning policy")?;
    Ok((store, bc))
}
