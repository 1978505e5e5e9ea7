//! Phase-2 orchestration: annealed rollout mixing between the frozen cloned
//! policy and the planner, trajectory labeling and storage, one mixed-batch
//! gradient update per environment step, periodic greedy evaluation, metrics
//! emission and checkpointing.
//!
//! Update cadence: updates begin once the first collected episode is in the
//! replay buffer (there is no separate model-seeding phase); the backlog of
//! steps from that first episode is then worked off immediately, so the
//! gradient-step counter equals the interaction-step counter from that point
//! on (update-to-data ratio 1).

use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::bc::BcPolicy;
use crate::data::{ReplayStore, Source, Trajectory};
use crate::envs::{make_env, Action, EnvSpec, Observation, StageEnv};
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::checkpoint;
use crate::nn::matrix::Matrix;
use crate::nn::params::{ParamGroup, ParamStore};
use crate::nn::tape::Tape;
use crate::planner::{plan, PlanConfig, PlanDiag, PlanState, WmSnapshot};
use crate::rewardlearn::{densify, densify_batch, discriminator_loss, DiscriminatorBank};
use crate::rng;
use crate::worldmodel::{RunningScale, WmLossWeights, WorldModel};

/// Linear mixing schedule α = min(1, α₀·t).
#[derive(Debug, Clone, Copy)]
pub struct AnnealState {
    alpha0: f64,
    t: u64,
}

impl AnnealState {
    pub fn new(alpha0: f64) -> Self {
        AnnealState { alpha0, t: 0 }
    }

    pub fn alpha(&self) -> f64 {
        (self.alpha0 * self.t as f64).min(1.0)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn advance(&mut self) {
        self.t += 1;
    }
}

/// Interaction and update accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct BudgetState {
    pub limit: usize,
    pub used: usize,
    pub updates: usize,
    pub episodes: usize,
}

/// Seeded Bernoulli choice between planner (probability α) and the cloned
/// policy; exactly one draw is consumed regardless of outcome.
pub fn planner_choice(alpha: f64, rng: &mut ChaCha8Rng) -> bool {
    !(rng.gen::<f64>() >= alpha)
}

#[derive(Debug, Clone)]
pub struct Phase2Config {
    pub budget_steps: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub demo_ratio: f64,
    pub alpha0: f64,
    pub beta: f64,
    pub weights: WmLossWeights,
    pub plan: PlanConfig,
    pub lr_model: f64,
    pub lr_encoder: f64,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Phase2Config {
    pub fn from_train_config(cfg: &crate::config::TrainConfig) -> Self {
        Phase2Config {
            budget_steps: cfg.budget_steps,
            batch_size: cfg.batch_size,
            horizon: cfg.horizon,
            demo_ratio: cfg.demo_ratio,
            alpha0: cfg.alpha0,
            beta: cfg.beta,
            weights: cfg.loss_weights(),
            plan: cfg.plan_config(),
            lr_model: cfg.lr_model,
            lr_encoder: cfg.lr_encoder,
            lr_policy: cfg.lr_policy,
            lr_disc: cfg.lr_disc,
            grad_clip: cfg.grad_clip,
            eval_interval: cfg.eval_interval,
            eval_episodes: cfg.eval_episodes,
            checkpoint_interval: cfg.checkpoint_interval,
            seed: cfg.seed,
        }
    }
}

/// Everything mutable the trainer works on. `bank` is absent for the
/// no-learned-reward ablation (sparse rewards pass through unchanged);
/// `bc` is absent for the no-pretrain ablation (the world model's own
/// policy prior fills the non-planner branch).
pub struct Phase2Session<'a> {
    pub spec: &'a EnvSpec,
    pub store: &'a mut ParamStore,
    pub wm: &'a WorldModel,
    pub bank: Option<&'a DiscriminatorBank>,
    pub bc: Option<(&'a ParamStore, &'a BcPolicy)>,
    pub replay: &'a mut ReplayStore,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    pub step: usize,
    pub success_rate: f64,
    pub mean_return_sparse: f64,
    pub mean_return_dense: f64,
}

#[derive(Debug, Clone)]
pub struct Phase2Report {
    pub budget: BudgetState,
    pub evals: Vec<EvalPoint>,
    pub final_success: f64,
    /// Histogram of max stage reached in the final evaluation (index =
    /// stage, length N+1).
    pub final_histogram: Vec<usize>,
    /// FNV hashes of the cloned policy's parameters before and after the
    /// run; equality witnesses the frozen-BC invariant.
    pub bc_hash_before: u64,
    pub bc_hash_after: u64,
}

/// Mean success over evaluation points — the area under the success curve
/// with uniform spacing, used for granularity comparisons.
pub fn success_auc(evals: &[EvalPoint]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals.iter().map(|e| e.success_rate).sum::<f64>() / evals.len() as f64
}

fn hash_params(store: &ParamStore) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (_, t) in store.iter() {
        mix(t.name.as_bytes());
        for v in &t.value.data {
            mix(&v.to_le_bytes());
        }
    }
    h
}

/// Running sums of per-update diagnostics between metrics rows.
#[derive(Debug, Clone)]
struct StatWindow {
    n: usize,
    l_reward: f64,
    l_value: f64,
    l_consistency: f64,
    l_policy: f64,
    l_disc: Vec<f64>,
    l_disc_n: Vec<usize>,
    acc_correct: Vec<usize>,
    acc_total: Vec<usize>,
    plan_n: usize,
    elite_mean: f64,
    elite_std: f64,
}

impl StatWindow {
    fn new(n_stages: usize) -> Self {
        StatWindow {
            n: 0,
            l_reward: 0.0,
            l_value: 0.0,
            l_consistency: 0.0,
            l_policy: 0.0,
            l_disc: vec![0.0; n_stages],
            l_disc_n: vec![0; n_stages],
            acc_correct: vec![0; n_stages],
            acc_total: vec![0; n_stages],
            plan_n: 0,
            elite_mean: 0.0,
            elite_std: 0.0,
        }
    }

    fn reset(&mut self) {
        *self = StatWindow::new(self.l_disc.len());
    }

    fn add_plan(&mut self, d: &PlanDiag) {
        self.plan_n += 1;
        self.elite_mean += d.elite_mean;
        self.elite_std += d.elite_std;
    }
}

/// One gradient update on a mixed batch; returns scalar diagnostics.
/// Gradient pass 1 covers world model + discriminators (+ encoder), pass 2
/// the policy prior only; a single optimizer step then applies both.
#[allow(clippy::too_many_arguments)]
fn update_once(
    store: &mut ParamStore,
    wm: &WorldModel,
    bank: Option<&DiscriminatorBank>,
    replay: &ReplayStore,
    cfg: &Phase2Config,
    n_stages: u32,
    opt: &mut Adam,
    scale: &mut RunningScale,
    rng_sampler: &mut ChaCha8Rng,
    rng_update: &mut ChaCha8Rng,
    window: &mut StatWindow,
) -> Result<()> {
    let batch = replay.sample_mixed(rng_sampler, cfg.batch_size, cfg.horizon, cfg.demo_ratio)?;
    let (bsz, h) = (batch.batch_size, batch.horizon);
    let obs_dim = batch.observations[0].cols;

    // One stacked gradient-free encoder pass over all H+1 observation sets.
    let mut stacked = Matrix::zeros((h + 1) * bsz, obs_dim);
    for (i, obs) in batch.observations.iter().enumerate() {
        for b in 0..bsz {
            stacked.row_mut(i * bsz + b).copy_from_slice(obs.row(b));
        }
    }
    let z_all = wm.encode_nograd(store, &stacked);
    let latent_dim = z_all.cols;
    let z_at = |i: usize| -> Matrix {
        let mut m = Matrix::zeros(bsz, latent_dim);
        for b in 0..bsz {
            m.row_mut(b).copy_from_slice(z_all.row(i * bsz + b));
        }
        m
    };
    let z_enc: Vec<Matrix> = (0..=h).map(z_at).collect();

    // Dense targets, recomputed from the current discriminators every
    // update. Reward r_i describes the post-action state o_{i+1}, so its
    // latent pairs with z_enc[i+1] for densification and TD bootstrapping.
    let mut dense: Vec<Vec<f64>> = Vec::with_capacity(h);
    for i in 0..h {
        match bank {
            Some(bank) => {
                dense.push(densify_batch(store, bank, &z_enc[i + 1], &batch.rewards[i], cfg.beta)?)
            }
            None => dense.push(batch.rewards[i].iter().map(|&r| f64::from(r)).collect()),
        }
    }
    // Reaching stage N ends the episode, but the stage indicator is a
    // state function: a solved task would keep paying N per step if the
    // rollout continued. Bootstrap those transitions with the analytic
    // absorbing value N/(1-γ) rather than the Q ensemble, which never sees
    // post-success data. Without this, holding stage N-1 to the horizon
    // out-values finishing (≈(N-1)/(1-γ) vs N) and planning exploits it.
    let gamma = cfg.weights.gamma;
    let succ_value =
        if gamma < 1.0 { f64::from(n_stages) / (1.0 - gamma) } else { f64::from(n_stages) };
    let mut td: Vec<Matrix> = Vec::with_capacity(h);
    for i in 0..h {
        let term: Vec<bool> = batch.rewards[i].iter().map(|&r| r == n_stages).collect();
        td.push(wm.td_target(store, &dense[i], &term, succ_value, &z_enc[i + 1], gamma, rng_update)?);
    }
    scale.update(&td[0].data);
    let latent_targets: Vec<Matrix> = (0..h).map(|i| z_enc[i + 1].clone()).collect();

    let mut tape = Tape::new();
    let (wm_loss, breakdown) =
        wm.wm_loss(&mut tape, store, &batch, &dense, &td, &latent_targets, &cfg.weights)?;

    // Discriminator loss over valid (step, sample) pairs, with gradient
    // flowing through a fresh on-tape encoding of the post-action states.
    let mut disc_break = None;
    let total_1 = if let Some(bank) = bank {
        let mut rows = 0usize;
        for i in 0..h {
            rows += batch.valid[i].iter().filter(|&&v| v).count();
        }
        let mut disc_obs = Matrix::zeros(rows, obs_dim);
        let mut rewards = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        let mut r_idx = 0;
        for i in 0..h {
            for b in 0..bsz {
                if batch.valid[i][b] {
                    disc_obs.row_mut(r_idx).copy_from_slice(batch.observations[i + 1].row(b));
                    rewards.push(batch.rewards[i][b]);
                    labels.push(batch.labels[i][b]);
                    r_idx += 1;
                }
            }
        }
        let disc_obs_node = tape.constant(disc_obs);
        let z_disc = wm.encode(&mut tape, store, disc_obs_node);
        let (disc_loss, bd) = discriminator_loss(&mut tape, store, bank, z_disc, &rewards, &labels)?;
        disc_break = Some(bd);
        match disc_loss {
            Some(dl) => tape.add(wm_loss, dl),
            None => wm_loss,
        }
    } else {
        wm_loss
    };
    tape.backward_filtered(
        total_1,
        store,
        Some(&[ParamGroup::Encoder, ParamGroup::Model, ParamGroup::Discriminator]),
    );

    let (pi_loss, _entropy) = wm.policy_prior_loss(
        &mut tape,
        store,
        &breakdown.rollout_latents,
        &cfg.weights,
        scale.scale(),
        rng_update,
    )?;
    tape.backward_filtered(pi_loss, store, Some(&[ParamGroup::Policy]));

    let l_pi = tape.scalar(pi_loss);
    if !tape.scalar(total_1).is_finite() || !l_pi.is_finite() {
        return Err(Error::NonFinite("phase-2 update loss".into()));
    }

    opt.step(
        store,
        &[ParamGroup::Encoder, ParamGroup::Model, ParamGroup::Policy, ParamGroup::Discriminator],
    )?;
    store.zero_grads();
    wm.update_targets(store, cfg.weights.q_momentum);

    window.n += 1;
    window.l_reward += breakdown.l_reward;
    window.l_value += breakdown.l_value;
    window.l_consistency += breakdown.l_consistency;
    window.l_policy += l_pi;
    if let Some(bd) = disc_break {
        for k in 0..window.l_disc.len() {
            if let Some(l) = bd.per_stage_loss.get(k).copied().flatten() {
                window.l_disc[k] += l;
                window.l_disc_n[k] += 1;
            }
            if let (Some(&c), Some(&t)) =
                (bd.per_stage_correct.get(k), bd.per_stage_count.get(k))
            {
                window.acc_correct[k] += c;
                window.acc_total[k] += t;
            }
        }
    }
    Ok(())
}

/// Evaluation report over a fixed seed set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub success_rate: f64,
    /// Count of episodes by maximum stage reached (length N+1).
    pub histogram: Vec<usize>,
    pub mean_return_sparse: f64,
    pub mean_return_dense: f64,
}

/// Run greedy episodes with an arbitrary action source. `densify_obs` maps
/// (post-action observation, sparse reward) to the dense reward used for
/// the dense-return column; `None` falls back to the sparse value.
pub fn evaluate_with<F>(
    spec: &EnvSpec,
    seeds: &[u64],
    mut act: F,
    mut densify_obs: Option<&mut dyn FnMut(&Observation, u32) -> f64>,
) -> Result<EvalReport>
where
    F: FnMut(&StageEnv, &Observation, usize) -> Result<Action>,
{
    if seeds.is_empty() {
        return Err(Error::EmptyInput("evaluation seeds"));
    }
    let mut env = make_env(spec)?;
    let mut histogram = vec![0usize; spec.n_stages as usize + 1];
    let mut sparse_sum = 0.0;
    let mut dense_sum = 0.0;
    for (ep, &seed) in seeds.iter().enumerate() {
        let mut obs = env.reset(seed);
        let mut best = 0u32;
        loop {
            let a = act(&env, &obs, ep)?;
            let (next, r, done) = env.step(&a)?;
            best = best.max(r.0);
            sparse_sum += f64::from(r.0);
            dense_sum += match densify_obs.as_mut() {
                Some(f) => f(&next, r.0),
                None => f64::from(r.0),
            };
            obs = next;
            if done {
                break;
            }
        }
        histogram[best as usize] += 1;
    }
    let n = seeds.len() as f64;
    Ok(EvalReport {
        success_rate: histogram[spec.n_stages as usize] as f64 / n,
        histogram,
        mean_return_sparse: sparse_sum / n,
        mean_return_dense: dense_sum / n,
    })
}

/// Greedy-planner evaluation (no exploration noise), with dense returns
/// computed from the current discriminators when a bank is present.
pub fn evaluate_planner(
    spec: &EnvSpec,
    store: &ParamStore,
    wm: &WorldModel,
    bank: Option<&DiscriminatorBank>,
    beta: f64,
    plan_cfg: &PlanConfig,
    seeds: &[u64],
    rng_tag: u64,
    base_seed: u64,
) -> Result<EvalReport> {
    let snapshot = WmSnapshot { store, wm };
    let mut plan_states: Vec<PlanState> = Vec::new();
    let mut rngs: Vec<ChaCha8Rng> = Vec::new();
    for ep in 0..seeds.len() {
        plan_states.push(PlanState::new(plan_cfg, spec.action_dim));
        rngs.push(rng::indexed_stream(base_seed, "eval-plan", rng_tag * 1_000_003 + ep as u64));
    }
    let mut densifier = |obs: &Observation, r: u32| -> f64 {
        match bank {
            Some(bank) => {
                let z = wm.encode_nograd(store, &Matrix::row_vec(obs.data.clone()));
                if r < bank.len() as u32 {
                    let logit = bank.logit_nograd(store, r as usize, &z).data[0];
                    densify(r, logit, bank.len() as u32, beta)
                } else {
                    f64::from(r)
                }
            }
            None => f64::from(r),
        }
    };
    evaluate_with(
        spec,
        seeds,
        |_env, obs, ep| {
            let z = wm.encode_nograd(store, &Matrix::row_vec(obs.data.clone()));
            let (a, _) =
                plan(&snapshot, plan_cfg, &z, &mut plan_states[ep], &mut rngs[ep], false)?;
            Ok(Action { components: a })
        },
        Some(&mut densifier),
    )
}

/// The Phase-2 loop. Writes `metrics.csv` and `checkpoints/` under
/// `out_dir` and returns the training report. Deterministic given the
/// config seed.
pub fn run_phase2(
    sess: Phase2Session<'_>,
    cfg: &Phase2Config,
    out_dir: &Path,
) -> Result<Phase2Report> {
    cfg.plan.validate()?;
    cfg.weights.validate()?;
    crate::rewardlearn::validate_beta(cfg.beta)?;
    if cfg.eval_interval == 0 || cfg.checkpoint_interval == 0 || cfg.eval_episodes == 0 {
        return Err(Error::InvalidConfig(
            "eval_interval, checkpoint_interval and eval_episodes must be positive".into(),
        ));
    }
    if let Some(bank) = sess.bank {
        if bank.len() != sess.spec.n_stages as usize {
            return Err(Error::SpecMismatch {
                expected: format!("{} discriminators", sess.spec.n_stages),
                got: format!("{}", bank.len()),
            });
        }
    }

    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let n_stages = sess.spec.n_stages as usize;
    let mut columns = vec![
        "step".to_string(),
        "episode".to_string(),
        "alpha".to_string(),
        "success_rate".to_string(),
        "mean_return_sparse".to_string(),
        "mean_return_dense".to_string(),
        "l_reward".to_string(),
        "l_value".to_string(),
        "l_consistency".to_string(),
        "l_policy".to_string(),
    ];
    for k in 0..n_stages {
        columns.push(format!("l_disc_{k}"));
    }
    for k in 0..n_stages {
        columns.push(format!("disc_acc_{k}"));
    }
    columns.push("elite_mean".to_string());
    columns.push("elite_std".to_string());
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"), &columns)?;

    let bc_hash_before = sess.bc.map(|(s, _)| hash_params(s)).unwrap_or(0);

    let mut env = make_env(sess.spec)?;
    let mut anneal = AnnealState::new(cfg.alpha0);
    let mut budget = BudgetState { limit: cfg.budget_steps, ..BudgetState::default() };
    let mut opt = Adam::new(
        sess.store,
        AdamConfig { grad_clip: cfg.grad_clip, ..AdamConfig::default() },
        &[
            (ParamGroup::Model, cfg.lr_model),
            (ParamGroup::Encoder, cfg.lr_encoder),
            (ParamGroup::Policy, cfg.lr_policy),
            (ParamGroup::Discriminator, cfg.lr_disc),
        ],
    );
    let mut scale = RunningScale::new(0.01);
    let mut window = StatWindow::new(n_stages);

    let mut rng_episode = rng::stream(cfg.seed, "env-episodes");
    let mut rng_mix = rng::stream(cfg.seed, "mix");
    let mut rng_plan = rng::stream(cfg.seed, "plan");
    let mut rng_bc = rng::stream(cfg.seed, "bc-act");
    let mut rng_sampler = rng::stream(cfg.seed, "sampler");
    let mut rng_update = rng::stream(cfg.seed, "update");
    let mut rng_eval_seeds = rng::stream(cfg.seed, "eval-seeds");
    let eval_seeds: Vec<u64> =
        (0..cfg.eval_episodes).map(|_| rng_eval_seeds.next_u64()).collect();

    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut last_eval: Option<EvalReport> = None;
    let mut plan_state = PlanState::new(&cfg.plan, sess.spec.action_dim);

    'training: while budget.used < budget.limit {
        let ep_seed = rng_episode.next_u64();
        let mut obs = env.reset(ep_seed);
        plan_state.reset(&cfg.plan);
        let mut observations = vec![obs.clone()];
        let mut actions: Vec<Action> = Vec::new();
        let mut rewards: Vec<u32> = Vec::new();

        loop {
            let alpha = anneal.alpha();
            let use_planner = planner_choice(alpha, &mut rng_mix);
            let action = if use_planner {
                let z = wm_encode_row(sess.store, sess.wm, &obs);
                let snapshot = WmSnapshot { store: sess.store, wm: sess.wm };
                let (a, diag) =
                    plan(&snapshot, &cfg.plan, &z, &mut plan_state, &mut rng_plan, true)?;
                window.add_plan(&diag);
                Action { components: a }
            } else {
                match sess.bc {
                    Some((bc_store, bc)) => {
                        // Greedy, not sampled: the clone's fitted log-std on
                        // a handful of demos is wide (worst on the gripper
                        // dim) and sampling it wrecks the long action chains
                        // a staged task needs, starving the buffer of the
                        // early successes this branch exists to supply.
                        Action { components: bc.act_greedy(bc_store, &obs.data) }
                    }
                    None => {
                        // No cloned policy (no-pretrain arm): the world
                        // model's own prior fills this branch.
                        let z = wm_encode_row(sess.store, sess.wm, &obs);
                        let a = sess.wm.policy_sample_nograd(sess.store, &z, &mut rng_bc);
                        Action {
                            components: a.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
                        }
                    }
                }
            };

            let (next, r, done) = env.step(&action)?;
            budget.used += 1;
            anneal.advance();
            observations.push(next.clone());
            actions.push(action);
            rewards.push(r.0);
            obs = next;

            // One update per interaction step once the buffer is non-empty;
            // the first completed episode's backlog is worked off at once.
            if sess.replay.buffer_steps() > 0 {
                while budget.updates < budget.used {
                    if let Err(e) = update_once(
                        sess.store,
                        sess.wm,
                        sess.bank,
                        sess.replay,
                        cfg,
                        sess.spec.n_stages,
                        &mut opt,
                        &mut scale,
                        &mut rng_sampler,
                        &mut rng_update,
                        &mut window,
                    ) {
                        let diag = out_dir.join("checkpoints").join("diagnostic_abort.ckpt");
                        let _ = checkpoint::save(
                            &diag,
                            sess.store,
                            &[
                                ("step".to_string(), budget.used as f64),
                                ("updates".to_string(), budget.updates as f64),
                            ],
                        );
                        return Err(e);
                    }
                    budget.updates += 1;
                }
            }

            if budget.used % cfg.eval_interval == 0 {
                let report = evaluate_planner(
                    sess.spec,
                    sess.store,
                    sess.wm,
                    sess.bank,
                    cfg.beta,
                    &cfg.plan,
                    &eval_seeds,
                    evals.len() as u64,
                    cfg.seed,
                )?;
                write_metrics_row(
                    &mut metrics,
                    budget.used,
                    budget.episodes,
                    anneal.alpha(),
                    &report,
                    &window,
                )?;
                evals.push(EvalPoint {
                    step: budget.used,
                    success_rate: report.success_rate,
                    mean_return_sparse: report.mean_return_sparse,
                    mean_return_dense: report.mean_return_dense,
                });
                window.reset();
                last_eval = Some(report);
            }
            if budget.used % cfg.checkpoint_interval == 0 {
                let path = out_dir
                    .join("checkpoints")
                    .join(format!("step_{:08}.ckpt", budget.used));
                checkpoint::save(
                    &path,
                    sess.store,
                    &[
                        ("step".to_string(), budget.used as f64),
                        ("seed".to_string(), cfg.seed as f64),
                        ("alpha".to_string(), anneal.alpha()),
                    ],
                )?;
            }

            if done {
                break;
            }
        }

        budget.episodes += 1;
        let success = rewards.iter().max().copied().unwrap_or(0) == sess.spec.n_stages;
        let traj = Trajectory::from_rollout(
            observations,
            actions,
            rewards,
            ep_seed,
            Source::Rollout,
            success,
        )?;
        sess.replay.insert(traj)?;

        // Work off the backlog the first episode accumulated (and any steps
        // taken past the previous episode's final update).
        while budget.updates < budget.used {
            if let Err(e) = update_once(
                sess.store,
                sess.wm,
                sess.bank,
                sess.replay,
                cfg,
                sess.spec.n_stages,
                &mut opt,
                &mut scale,
                &mut rng_sampler,
                &mut rng_update,
                &mut window,
            ) {
                let diag = out_dir.join("checkpoints").join("diagnostic_abort.ckpt");
                let _ = checkpoint::save(
                    &diag,
                    sess.store,
                    &[
                        ("step".to_string(), budget.used as f64),
                        ("updates".to_string(), budget.updates as f64),
                    ],
                );
                return Err(e);
            }
            budget.updates += 1;
        }

        if budget.used >= budget.limit {
            break 'training;
        }
    }

    // Final evaluation (reused if the last step already evaluated).
    let final_report = match last_eval {
        Some(ref r) if budget.used % cfg.eval_interval == 0 => r.clone(),
        _ => {
            let report = evaluate_planner(
                sess.spec,
                sess.store,
                sess.wm,
                sess.bank,
                cfg.beta,
                &cfg.plan,
                &eval_seeds,
                evals.len() as u64,
                cfg.seed,
            )?;
            write_metrics_row(
                &mut metrics,
                budget.used,
                budget.episodes,
                anneal.alpha(),
                &report,
                &window,
            )?;
            evals.push(EvalPoint {
                step: budget.used,
                success_rate: report.success_rate,
                mean_return_sparse: report.mean_return_sparse,
                mean_return_dense: report.mean_return_dense,
            });
            report
        }
    };
    metrics.flush()?;
    // `eval_tag` lets a later evaluation replay the exact final-eval rng
    // stream and reproduce `final_success` bit-for-bit.
    checkpoint::save(
        &out_dir.join("checkpoints").join("final.ckpt"),
        sess.store,
        &[
            ("step".to_string(), budget.used as f64),
            ("seed".to_string(), cfg.seed as f64),
            ("alpha".to_string(), anneal.alpha()),
            ("eval_tag".to_string(), (evals.len() - 1) as f64),
            ("final_success".to_string(), final_report.success_rate),
        ],
    )?;

    let bc_hash_after = sess.bc.map(|(s, _)| hash_params(s)).unwrap_or(0);
    Ok(Phase2Report {
        budget,
        final_success: final_report.success_rate,
        final_histogram: final_report.histogram.clone(),
        evals,
        bc_hash_before,
        bc_hash_after,
    })
}

fn wm_encode_row(store: &ParamStore, wm: &WorldModel, obs: &Observation) -> Matrix {
    wm.encode_nograd(store, &Matrix::row_vec(obs.data.clone()))
}

fn write_metrics_row(
    metrics: &mut MetricsWriter,
    step: usize,
    episode: usize,
    alpha: f64,
    report: &EvalReport,
    window: &StatWindow,
) -> Result<()> {
    let n = window.n.max(1) as f64;
    let mut row = vec![
        step as f64,
        episode as f64,
        alpha,
        report.success_rate,
        report.mean_return_sparse,
        report.mean_return_dense,
        window.l_reward / n,
        window.l_value / n,
        window.l_consistency / n,
        window.l_policy / n,
    ];
    for k in 0..window.l_disc.len() {
        let cnt = window.l_disc_n[k].max(1) as f64;
        row.push(window.l_disc[k] / cnt);
    }
    for k in 0..window.l_disc.len() {
        let total = window.acc_total[k];
        row.push(if total == 0 { 0.0 } else { window.acc_correct[k] as f64 / total as f64 });
    }
    let pn = window.plan_n.max(1) as f64;
    row.push(window.elite_mean / pn);
    row.push(window.elite_std / pn);
    metrics.write_row(&row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::env_spec;
    use crate::worldmodel::{LatentNorm, LogStdBounds, WmConfig};

    #[test]
    fn anneal_schedule_matches_the_pinned_arithmetic() {
        let mut a = AnnealState::new(5e-5);
        assert_eq!(a.alpha(), 0.0, "alpha starts at zero");
        let mut prev = 0.0;
        let mut reached_one_at = None;
        for t in 1..=25_000u64 {
            a.advance();
            let alpha = a.alpha();
            assert!(alpha >= prev, "alpha must be non-decreasing");
            prev = alpha;
            if alpha == 1.0 && reached_one_at.is_none() {
                reached_one_at = Some(t);
            }
        }
        assert_eq!(a.t(), 25_000);
        assert_eq!(reached_one_at, Some(20_000), "alpha hits 1 exactly at 1/alpha0");
        let mut half = AnnealState::new(5e-5);
        for _ in 0..10_000 {
            half.advance();
        }
        assert_eq!(half.alpha(), 0.5);
    }

    #[test]
    fn planner_choice_frequency_tracks_alpha() {
        let mut r = rng::stream(11, "mix-test");
        let n = 10_000;
        let picks = (0..n).filter(|_| planner_choice(0.5, &mut r)).count();
        let frac = picks as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "planner fraction {frac}");
        // Degenerate ends consume a draw but never vary.
        assert!(!planner_choice(0.0, &mut r));
        assert!(planner_choice(1.0, &mut r));
    }

    #[test]
    fn success_auc_is_mean_of_eval_points() {
        let evals = vec![
            EvalPoint { step: 1, success_rate: 0.0, mean_return_sparse: 0.0, mean_return_dense: 0.0 },
            EvalPoint { step: 2, success_rate: 0.5, mean_return_sparse: 0.0, mean_return_dense: 0.0 },
            EvalPoint { step: 3, success_rate: 1.0, mean_return_sparse: 0.0, mean_return_dense: 0.0 },
        ];
        assert!((success_auc(&evals) - 0.5).abs() < 1e-12);
        assert_eq!(success_auc(&[]), 0.0);
    }

    #[test]
    fn expert_through_eval_harness_reaches_95_percent() {
        let spec = env_spec("grasp-lift-place").unwrap();
        let seeds: Vec<u64> = (0..40).map(|i| 9000 + i).collect();
        let report = evaluate_with(
            &spec,
            &seeds,
            |env, _obs, _ep| Ok(env.expert_action()),
            None,
        )
        .unwrap();
        assert!(report.success_rate >= 0.95, "expert rate {}", report.success_rate);
        assert_eq!(report.histogram.iter().sum::<usize>(), seeds.len());
        assert_eq!(report.histogram.len(), 4);
        // Sparse and dense returns agree without a densifier.
        assert_eq!(report.mean_return_sparse, report.mean_return_dense);
    }

    #[test]
    fn short_phase2_run_keeps_the_invariants() {
        use crate::bc::BcConfig;
        use crate::data::expert_rollout;
        use crate::rewardlearn::DiscriminatorBank;

        let spec = env_spec("reach").unwrap();
        let dir = std::env::temp_dir().join(format!("phase2-smoke-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);

        let mut store = ParamStore::new();
        let mut r = rng::stream(7, "wm-init");
        let wm_cfg = WmConfig {
            latent_dim: 8,
            width: 16,
            latent_norm: LatentNorm::SimNorm(4),
            log_std: LogStdBounds::default(),
            ..WmConfig::new(spec.observation_dim, spec.action_dim)
        };
        let wm = WorldModel::new(&mut store, wm_cfg, &mut r).unwrap();
        let bank = DiscriminatorBank::new(&mut store, &mut r, 8, spec.n_stages, 8).unwrap();

        let mut bc_store = ParamStore::new();
        let mut rb = rng::stream(7, "bc-init");
        let bc_cfg = BcConfig::default();
        let bc = BcPolicy::new(
            &mut bc_store,
            &WmConfig {
                latent_dim: 8,
                width: 16,
                latent_norm: LatentNorm::SimNorm(4),
                log_std: bc_cfg.log_std,
                ..WmConfig::new(spec.observation_dim, spec.action_dim)
            },
            bc_cfg.log_std,
            &mut rb,
        )
        .unwrap();

        let mut replay = ReplayStore::new(10_000);
        let mut demo_rng = rng::stream(7, "demo-seeds");
        let mut demos = Vec::new();
        while demos.len() < 2 {
            let traj = expert_rollout(&spec, demo_rng.next_u64(), Source::Demo).unwrap();
            if traj.success {
                demos.push(traj);
            }
        }
        replay.set_demos(demos).unwrap();

        let cfg = Phase2Config {
            budget_steps: 70,
            batch_size: 6,
            horizon: 2,
            demo_ratio: 0.5,
            alpha0: 0.02,
            beta: 1.0 / 3.0,
            weights: WmLossWeights::default(),
            plan: PlanConfig {
                horizon: 2,
                num_samples: 10,
                num_prior_samples: 2,
                num_elites: 4,
                iterations: 1,
                ..PlanConfig::default()
            },
            lr_model: 3e-4,
            lr_encoder: 1e-4,
            lr_policy: 3e-4,
            lr_disc: 3e-4,
            grad_clip: 10.0,
            eval_interval: 40,
            eval_episodes: 2,
            checkpoint_interval: 60,
            seed: 7,
        };
        let report = run_phase2(
            Phase2Session {
                spec: &spec,
                store: &mut store,
                wm: &wm,
                bank: Some(&bank),
                bc: Some((&bc_store, &bc)),
                replay: &mut replay,
            },
            &cfg,
            &dir,
        )
        .unwrap();

        // Budget reached, and the update counter tracks interaction steps
        // one-for-one after the first episode completes.
        assert!(report.budget.used >= cfg.budget_steps);
        assert_eq!(report.budget.updates, report.budget.used);
        assert!(report.budget.episodes >= 1);
        // The cloned policy never changed.
        assert_eq!(report.bc_hash_before, report.bc_hash_after);
        assert!(!report.evals.is_empty());
        assert_eq!(report.final_histogram.iter().sum::<usize>(), cfg.eval_episodes);

        // Artifacts landed where promised.
        let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert!(lines.len() >= 2, "header plus at least one row");
        assert!(lines[0].starts_with("step,episode,alpha,success_rate"));
        assert!(dir.join("checkpoints").join("final.ckpt").exists());
        assert!(dir.join("checkpoints").join("step_00000060.ckpt").exists());

        // Replay labels match the oracle recomputed from stored rewards.
        let mut checked = 0;
        for traj in replay.buffer_trajectories() {
            let oracle = crate::rewardlearn::compute_max_stage_labels(&traj.rewards).unwrap();
            assert_eq!(traj.labels, oracle);
            checked += 1;
        }
        assert!(checked >= 1);

        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn phase2_is_deterministic_across_reruns() {
        use crate::data::expert_rollout;

        let spec = env_spec("reach").unwrap();
        let run = |tag: &str| -> (Vec<u8>, u64) {
            let dir = std::env::temp_dir()
                .join(format!("phase2-det-{}-{}", std::process::id(), tag));
            let _ = std::fs::remove_dir_all(&dir);
            let mut store = ParamStore::new();
            let mut r = rng::stream(19, "wm-init");
            let wm_cfg = WmConfig {
                latent_dim: 8,
                width: 12,
                latent_norm: LatentNorm::SimNorm(4),
                log_std: LogStdBounds::default(),
                ..WmConfig::new(spec.observation_dim, spec.action_dim)
            };
            let wm = WorldModel::new(&mut store, wm_cfg, &mut r).unwrap();
            let mut replay = ReplayStore::new(10_000);
            let mut demo_rng = rng::stream(19, "demo-seeds");
            let mut demos = Vec::new();
            while demos.len() < 2 {
                let traj = expert_rollout(&spec, demo_rng.next_u64(), Source::Demo).unwrap();
                if traj.success {
                    demos.push(traj);
                }
            }
            replay.set_demos(demos).unwrap();
            let cfg = Phase2Config {
                budget_steps: 45,
                batch_size: 4,
                horizon: 2,
                demo_ratio: 0.5,
                alpha0: 1.0,
                beta: 1.0 / 3.0,
                weights: WmLossWeights::default(),
                plan: PlanConfig {
                    horizon: 2,
                    num_samples: 8,
                    num_prior_samples: 2,
                    num_elites: 3,
                    iterations: 1,
                    ..PlanConfig::default()
                },
                lr_model: 3e-4,
                lr_encoder: 1e-4,
                lr_policy: 3e-4,
                lr_disc: 3e-4,
                grad_clip: 10.0,
                eval_interval: 40,
                eval_episodes: 2,
                checkpoint_interval: 1_000_000,
                seed: 19,
            };
            run_phase2(
                Phase2Session {
                    spec: &spec,
                    store: &mut store,
                    wm: &wm,
                    bank: None,
                    bc: None,
                    replay: &mut replay,
                },
                &cfg,
                &dir,
            )
            .unwrap();
            let bytes = std::fs::read(dir.join("metrics.csv")).unwrap();
            let hash = hash_params(&store);
            let _ = std::fs::remove_dir_all(&dir);
            (bytes, hash)
        };
        let (m1, h1) = run("a");
        let (m2, h2) = run("b");
        assert_eq!(m1, m2, "metrics bytes must match across reruns");
        assert_eq!(h1, h2, "final parameters must match across reruns");
    }

    #[test]
    fn untrained_model_evaluates_near_zero_on_three_stage_task() {
        let spec = env_spec("grasp-lift-place").unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "wm-init");
        let wm_cfg = WmConfig {
            latent_dim: 8,
            width: 12,
            latent_norm: LatentNorm::SimNorm(4),
            log_std: LogStdBounds::default(),
            ..WmConfig::new(spec.observation_dim, spec.action_dim)
        };
        let wm = WorldModel::new(&mut store, wm_cfg, &mut r).unwrap();
        let plan_cfg = PlanConfig {
            num_samples: 24,
            num_prior_samples: 4,
            num_elites: 6,
            iterations: 2,
            ..PlanConfig::default()
        };
        let seeds: Vec<u64> = (0..10).map(|i| 100 + i).collect();
        let report =
            evaluate_planner(&spec, &store, &wm, None, 1.0 / 3.0, &plan_cfg, &seeds, 0, 3)
                .unwrap();
        assert!(report.success_rate <= 0.1, "untrained rate {}", report.success_rate);
        assert_eq!(report.histogram.iter().sum::<usize>(), 10);
    }
}
