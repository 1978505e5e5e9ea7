//! Phase-1 behavior cloning: jointly pretrain an encoder and a
//! tanh-squashed Gaussian policy on demonstration (observation, action)
//! pairs by negative log-likelihood, with rollout-based early stopping.
//!
//! The BC encoder/policy shapes mirror the world model's exactly so the
//! weights transfer one-to-one; the BC policy then stays frozen as the
//! rollout prior for the second phase.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::data::Trajectory;
use crate::envs::{make_env, Action, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::matrix::Matrix;
use crate::nn::mlp::{Activation, Mlp, MlpSpec};
use crate::nn::params::{ParamGroup, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::rng;
use crate::worldmodel::{mean_squashed, policy_forward_nograd, policy_forward_tape, LogStdBounds, WmConfig};

/// Inverse-squash margin: actions are clipped to ±(1 − ATANH_MARGIN) before
/// atanh so demonstration actions that saturate the bounds stay finite.
pub const ATANH_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Soft log-std bounds during cloning. The floor sits well above the
    /// control phase's lower bound: NLL on a handful of demos otherwise
    /// collapses the std and destabilizes the transferred weights.
    pub log_std: LogStdBounds,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            steps: 3000,
            batch_size: 64,
            lr: 3e-4,
            eval_interval: 500,
            eval_episodes: 20,
            patience: 10,
            log_std: LogStdBounds { min: -5.0, max: 2.0 },
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig(
                "bc batch_size, eval_interval and eval_episodes must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("bc lr must be positive".into()));
        }
        if self.log_std.min >= self.log_std.max {
            return Err(Error::InvalidConfig("bc log_std bounds inverted".into()));
        }
        Ok(())
    }
}

/// Encoder + squashed-Gaussian policy with the same shapes as the world
/// model's `h` and `pi`, living in their own parameter store.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    encoder: Mlp,
    policy: Mlp,
    bounds: LogStdBounds,
    act_dim: usize,
}

impl BcPolicy {
    /// Shapes are taken from the world-model config to guarantee one-to-one
    /// weight transfer; only the log-std bounds differ during cloning.
    pub fn new(
        store: &mut ParamStore,
        wm_cfg: &WmConfig,
        bounds: LogStdBounds,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = vec![wm_cfg.width; wm_cfg.hidden_layers];
        let encoder = Mlp::new(
            store,
            &MlpSpec {
                name: "h".into(),
                group: ParamGroup::Encoder,
                input: wm_cfg.obs_dim,
                hidden: hidden.clone(),
                output: wm_cfg.latent_dim,
                hidden_act: Activation::Mish,
                output_act: wm_cfg.latent_norm.activation(),
                zero_init_last: false,
            },
            rng,
        )?;
        let policy = Mlp::new(
            store,
            &MlpSpec {
                name: "pi".into(),
                group: ParamGroup::Policy,
                input: wm_cfg.latent_dim,
                hidden,
                output: 2 * wm_cfg.act_dim,
                hidden_act: Activation::Mish,
                output_act: Activation::None,
                zero_init_last: false,
            },
            rng,
        )?;
        Ok(BcPolicy { encoder, policy, bounds, act_dim: wm_cfg.act_dim })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    pub fn bounds(&self) -> LogStdBounds {
        self.bounds
    }

    /// Greedy action: squashed policy mean at the encoded observation.
    pub fn act_greedy(&self, store: &ParamStore, obs: &[f64]) -> Vec<f64> {
        let o = Matrix::row_vec(obs.to_vec());
        let z = self.encoder.forward_nograd(store, &o);
        let out = policy_forward_nograd(store, &self.policy, &z, self.bounds);
        mean_squashed(&out).data
    }

    /// Stochastic action sample from the cloned policy.
    pub fn act_sample(&self, store: &ParamStore, obs: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let o = Matrix::row_vec(obs.to_vec());
        let z = self.encoder.forward_nograd(store, &o);
        let out = policy_forward_nograd(store, &self.policy, &z, self.bounds);
        crate::worldmodel::sample_squashed(&out, rng).data
    }
}

/// Mean NLL of demonstration actions under the squashed Gaussian:
/// `mean_b Σ_dims [ 0.5((u−μ)/σ)² + log σ + 0.5 ln 2π + ln(1 − a² + ε) ]`
/// with `u = atanh(clip(a))`. Gradients flow into encoder and policy.
pub fn bc_loss(
    tape: &mut Tape,
    store: &ParamStore,
    bc: &BcPolicy,
    observations: &Matrix,
    actions: &Matrix,
) -> Result<NodeId> {
    if observations.rows != actions.rows {
        return Err(Error::DimMismatch {
            context: "bc_loss: observation vs action rows".into(),
            expected: observations.rows,
            got: actions.rows,
        });
    }
    if observations.rows == 0 {
        return Err(Error::EmptyInput("bc_loss batch"));
    }
    if actions.cols != bc.act_dim {
        return Err(Error::DimMismatch {
            context: "bc_loss: action dim".into(),
            expected: bc.act_dim,
            got: actions.cols,
        });
    }
    let b = observations.rows as f64;

    // Pre-squash targets u = atanh(a), clipped away from ±1; both u and the
    // Jacobian term depend only on the data, so the Jacobian enters as a
    // constant offset.
    let u = actions.map(|a| a.clamp(-(1.0 - ATANH_MARGIN), 1.0 - ATANH_MARGIN).atanh());
    let jacobian: f64 = actions
        .data
        .iter()
        .map(|a| {
            let c = a.clamp(-(1.0 - ATANH_MARGIN), 1.0 - ATANH_MARGIN);
            (1.0 - c * c + ATANH_MARGIN).ln()
        })
        .sum::<f64>()
        / b;
    let const_term = 0.5 * (2.0 * std::f64::consts::PI).ln() * actions.cols as f64 + jacobian;

    let obs_node = tape.constant(observations.clone());
    let z = bc.encoder.forward(tape, store, obs_node);
    let (mean, log_std) = policy_forward_tape(tape, store, &bc.policy, z, bc.bounds);
    let u_node = tape.constant(u);
    let diff = tape.sub(u_node, mean);
    let neg_log_std = tape.neg(log_std);
    let inv_std = tape.exp(neg_log_std);
    let scaled = tape.mul(diff, inv_std);
    let sq = tape.square(scaled);
    let half_sq = tape.mul_const(sq, 0.5);
    let per_elem = tape.add(half_sq, log_std);
    let sum = tape.sum_all(per_elem);
    let mean_nll = tape.mul_const(sum, 1.0 / b);
    Ok(tape.add_const(mean_nll, const_term))
}

/// One point of the pretraining evaluation curve.
#[derive(Debug, Clone, Copy)]
pub struct BcEvalPoint {
    pub step: usize,
    pub success: f64,
}

#[derive(Debug, Clone)]
pub struct BcReport {
    pub eval_curve: Vec<BcEvalPoint>,
    pub best_success: f64,
    pub best_step: usize,
    pub steps_run: usize,
    /// Environment steps consumed by evaluation rollouts; accounted
    /// separately from the interaction budget.
    pub eval_env_steps: usize,
    /// Episode seeds used for every evaluation round (fixed across rounds).
    pub eval_seeds: Vec<u64>,
    pub losses: Vec<f64>,
}

/// Greedy rollouts on fixed seeds; returns (success fraction, env steps).
pub fn evaluate_bc(
    store: &ParamStore,
    bc: &BcPolicy,
    spec: &EnvSpec,
    eval_seeds: &[u64],
) -> Result<(f64, usize)> {
    let mut env = make_env(spec)?;
    let mut successes = 0usize;
    let mut env_steps = 0usize;
    for &s in eval_seeds {
        let mut obs = env.reset(s);
        let mut reached = 0u32;
        loop {
            let a = bc.act_greedy(store, &obs.data);
            let (next, r, done) = env.step(&Action { components: a })?;
            env_steps += 1;
            reached = reached.max(r.0);
            obs = next;
            if done {
                break;
            }
        }
        if reached == spec.n_stages {
            successes += 1;
        }
    }
    Ok((successes as f64 / eval_seeds.len() as f64, env_steps))
}

/// Adam on `bc_loss` over uniformly sampled demo pairs, evaluating every
/// `eval_interval` steps on a fixed seed set and keeping the best snapshot.
/// Stops early after `patience` evaluations without improvement. The store
/// is left holding the best-evaluated weights (or the initial weights when
/// `steps` is zero).
pub fn pretrain(
    store: &mut ParamStore,
    bc: &BcPolicy,
    demos: &[Trajectory],
    spec: &EnvSpec,
    cfg: &BcConfig,
    seed: u64,
) -> Result<BcReport> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::DemosRequired);
    }

    // Flatten demos into (obs, action) pairs.
    let mut obs_pool: Vec<&[f64]> = Vec::new();
    let mut act_pool: Vec<&[f64]> = Vec::new();
    for d in demos {
        for t in 0..d.len() {
            obs_pool.push(&d.observations[t].data);
            act_pool.push(&d.actions[t].components);
        }
    }
    let obs_dim = obs_pool[0].len();
    let act_dim = act_pool[0].len();

    let mut eval_seed_rng = rng::stream(seed, "bc-eval");
    let eval_seeds: Vec<u64> = (0..cfg.eval_episodes).map(|_| eval_seed_rng.next_u64()).collect();
    let mut batch_rng = rng::stream(seed, "bc-batch");

    let mut opt = Adam::new(
        store,
        AdamConfig::default(),
        &[(ParamGroup::Encoder, cfg.lr), (ParamGroup::Policy, cfg.lr)],
    );

    let mut report = BcReport {
        eval_curve: Vec::new(),
        best_success: f64::NEG_INFINITY,
        best_step: 0,
        steps_run: 0,
        eval_env_steps: 0,
        eval_seeds: eval_seeds.clone(),
        losses: Vec::new(),
    };
    let mut best_snapshot: Option<Vec<Matrix>> = None;
    let mut evals_since_best = 0usize;

    for step in 1..=cfg.steps {
        let mut obs = Matrix::zeros(cfg.batch_size, obs_dim);
        let mut act = Matrix::zeros(cfg.batch_size, act_dim);
        for r in 0..cfg.batch_size {
            let pick = batch_rng.gen_range(0..obs_pool.len());
            obs.row_mut(r).copy_from_slice(obs_pool[pick]);
            act.row_mut(r).copy_from_slice(act_pool[pick]);
        }
        let mut tape = Tape::new();
        let loss = bc_loss(&mut tape, store, bc, &obs, &act)?;
        report.losses.push(tape.scalar(loss));
        tape.backward(loss, store);
        opt.step(store, &[ParamGroup::Encoder, ParamGroup::Policy])?;
        store.zero_grads();
        report.steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let (success, env_steps) = evaluate_bc(store, bc, spec, &eval_seeds)?;
            report.eval_env_steps += env_steps;
            report.eval_curve.push(BcEvalPoint { step, success });
            if success > report.best_success {
                report.best_success = success;
                report.best_step = step;
                best_snapshot =
                    Some(store.iter().map(|(_, t)| t.value.clone()).collect());
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    if let Some(snap) = best_snapshot {
        for (i, value) in snap.into_iter().enumerate() {
            store.get_mut(crate::nn::params::ParamId(i)).value = value;
        }
    } else {
        report.best_success = 0.0;
    }
    Ok(report)
}

/// Copy the BC encoder and policy weights into the world model's `h` and
/// `pi` (matched by parameter name); every other head is untouched.
pub fn transfer_into(
    wm_store: &mut ParamStore,
    bc_store: &ParamStore,
    bc: &BcPolicy,
) -> Result<()> {
    let wm_ids: std::collections::HashMap<String, crate::nn::params::ParamId> =
        wm_store.iter().map(|(id, t)| (t.name.clone(), id)).collect();
    let mut src_ids = bc.encoder.param_ids();
    src_ids.extend(bc.policy.param_ids());
    for src in src_ids {
        let tensor = bc_store.get(src);
        let id = wm_ids.get(&tensor.name).ok_or_else(|| Error::SpecMismatch {
            expected: format!("world-model parameter named {}", tensor.name),
            got: "no such parameter".into(),
        })?;
        let dst = wm_store.get_mut(*id);
        if dst.value.rows != tensor.value.rows || dst.value.cols != tensor.value.cols {
            return Err(Error::DimMismatch {
                context: format!("transfer_into: {}", tensor.name),
                expected: dst.value.data.len(),
                got: tensor.value.data.len(),
            });
        }
        dst.value = tensor.value.clone();
    }
    Ok(())
}
