//! Shared fixtures for the criterion benchmarks: small but realistically
//! shaped models so timings track the quantities that matter at the desk
//! scale (per-step planning cost, per-update gradient cost, env stepping).

use rand_chacha::ChaCha8Rng;
use stagerl::envs::{env_spec, EnvSpec};
use stagerl::nn::params::ParamStore;
use stagerl::rewardlearn::DiscriminatorBank;
use stagerl::rng;
use stagerl::worldmodel::{LatentNorm, LogStdBounds, WmConfig, WorldModel};

pub struct Fixture {
    pub spec: EnvSpec,
    pub store: ParamStore,
    pub wm: WorldModel,
    pub bank: DiscriminatorBank,
    pub rng: ChaCha8Rng,
}

/// A mid-sized model on the three-stage task.
pub fn fixture() -> Fixture {
    let spec = env_spec("grasp-lift-place").expect("known task");
    let mut store = ParamStore::new();
    let mut r = rng::stream(1234, "bench-init");
    let cfg = WmConfig {
        latent_dim: 32,
        width: 64,
        latent_norm: LatentNorm::SimNorm(8),
        log_std: LogStdBounds::default(),
        ..WmConfig::new(spec.observation_dim, spec.action_dim)
    };
    let wm = WorldModel::new(&mut store, cfg, &mut r).expect("model init");
    let bank =
        DiscriminatorBank::new(&mut store, &mut r, 32, spec.n_stages, 32).expect("bank init");
    let rng = rng::stream(1234, "bench-run");
    Fixture { spec, store, wm, bank, rng }
}
