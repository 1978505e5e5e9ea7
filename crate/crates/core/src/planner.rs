//! Sample-based MPPI planner over a latent model.
//!
//! Each call samples Gaussian action sequences around a running mean,
//! mixes in sequences drawn from the policy prior rolled through the
//! dynamics, scores everything with discounted model reward plus a terminal
//! value, and refits the Gaussian to softmax-weighted elites. The planner
//! only ever borrows the model immutably, so it cannot mutate parameters.
//!
//! The model is abstracted behind [`LatentModel`] so the scoring loop can be
//! exercised against synthetic landscapes with known optima.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::params::ParamStore;
use crate::worldmodel::{sample_standard_normal, WorldModel};

/// Minimal model interface for planning: batched dynamics, reward, terminal
/// value and a prior action source. Row b of each matrix is candidate b.
pub trait LatentModel {
    fn act_dim(&self) -> usize;
    /// Advance a batch of latents by one step.
    fn step(&self, z: &Matrix, a: &Matrix) -> Matrix;
    /// Per-row immediate reward, shape (B, 1).
    fn reward(&self, z: &Matrix, a: &Matrix) -> Matrix;
    /// Per-row terminal value estimate, shape (B, 1).
    fn terminal_value(&self, z: &Matrix, rng: &mut ChaCha8Rng) -> Matrix;
    /// Per-row action drawn from the policy prior.
    fn prior_action(&self, z: &Matrix, rng: &mut ChaCha8Rng) -> Matrix;
    /// Deterministic prior action (used for warm-start padding).
    fn prior_mean(&self, z: &Matrix) -> Matrix;
}

/// Read-only view of a [`WorldModel`] for planning: terminal value is the
/// min of two random online Q members at a policy sample.
pub struct WmSnapshot<'a> {
    pub store: &'a ParamStore,
    pub wm: &'a WorldModel,
}

impl LatentModel for WmSnapshot<'_> {
    fn act_dim(&self) -> usize {
        self.wm.cfg().act_dim
    }

    fn step(&self, z: &Matrix, a: &Matrix) -> Matrix {
        self.wm.dynamics_nograd(self.store, z, a)
    }

    fn reward(&self, z: &Matrix, a: &Matrix) -> Matrix {
        self.wm.reward_nograd(self.store, z, a)
    }

    fn terminal_value(&self, z: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        let a = self.wm.policy_sample_nograd(self.store, z, rng);
        self.wm.q_min2_nograd(self.store, z, &a, rng)
    }

    fn prior_action(&self, z: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        self.wm.policy_sample_nograd(self.store, z, rng)
    }

    fn prior_mean(&self, z: &Matrix) -> Matrix {
        self.wm.policy_mean_nograd(self.store, z)
    }
}

/// Success-absorbing semantics for imagined rollouts. Environments here end
/// an episode the moment the final stage lands, so the model never sees
/// post-success states and its reward head extrapolates garbage there. When
/// a predicted step reward reaches `threshold`, the step is scored as
/// `reward + γ·value` and the candidate's rollout stops (no terminal
/// bootstrap) — the same absorbing rule the TD target uses.
#[derive(Debug, Clone, Copy)]
pub struct AbsorbSpec {
    /// Predicted reward at or above this counts as task completion.
    pub threshold: f64,
    /// Reward credited for the completing step (caps hallucinated values).
    pub reward: f64,
    /// Value of the absorbing post-success state.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub horizon: usize,
    pub num_samples: usize,
    pub num_prior_samples: usize,
    pub num_elites: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub min_std: f64,
    pub max_std: f64,
    /// Std of the Gaussian noise added to the executed action when
    /// exploring; evaluation uses none.
    pub exploration_std: f64,
    pub gamma: f64,
    /// Optional success-absorbing scoring; `None` scores every sequence to
    /// the full horizon plus terminal value.
    pub absorb: Option<AbsorbSpec>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 3,
            num_samples: 512,
            num_prior_samples: 24,
            num_elites: 64,
            iterations: 6,
            temperature: 0.5,
            min_std: 0.05,
            max_std: 2.0,
            exploration_std: 0.05,
            gamma: 0.99,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("plan horizon must be >= 1".into()));
        }
        if self.num_elites == 0 || self.num_elites > self.num_samples + self.num_prior_samples {
            return Err(Error::InvalidConfig(format!(
                "num_elites {} outside 1..={}",
                self.num_elites,
                self.num_samples + self.num_prior_samples
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0 <= self.min_std && self.min_std <= self.max_std) || self.max_std <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "std bounds [{}, {}] invalid",
                self.min_std, self.max_std
            )));
        }
        if self.exploration_std < 0.0 {
            return Err(Error::InvalidConfig("exploration_std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian action-sequence distribution carried across environment steps.
#[derive(Debug, Clone)]
pub struct PlanState {
    /// (H, A) running mean.
    pub mean: Matrix,
    /// (H, A) running std, clamped to the config bounds.
    pub std: Matrix,
    initialized: bool,
}

impl PlanState {
    pub fn new(cfg: &PlanConfig, act_dim: usize) -> Self {
        PlanState {
            mean: Matrix::zeros(cfg.horizon, act_dim),
            std: Matrix::zeros(cfg.horizon, act_dim).map(|_| cfg.max_std),
            initialized: false,
        }
    }

    /// Forget the previous episode's solution.
    pub fn reset(&mut self, cfg: &PlanConfig) {
        self.mean = Matrix::zeros(self.mean.rows, self.mean.cols);
        self.std = self.std.map(|_| cfg.max_std);
        self.initialized = false;
    }

    /// Shift the mean one step into the future, pad the final row with the
    /// given action, and reset std to its maximum.
    pub fn shift_and_pad(&mut self, pad: &[f64], cfg: &PlanConfig) {
        let (h, a) = (self.mean.rows, self.mean.cols);
        assert_eq!(pad.len(), a, "pad action dimension");
        for i in 0..h.saturating_sub(1) {
            for j in 0..a {
                let next = self.mean.at(i + 1, j);
                *self.mean.at_mut(i, j) = next;
            }
        }
        for j in 0..a {
            *self.mean.at_mut(h - 1, j) = pad[j].clamp(-1.0, 1.0);
        }
        self.std = self.std.map(|_| cfg.max_std);
    }
}

/// Elite-score diagnostics from the final refinement iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlanDiag {
    pub elite_mean: f64,
    pub elite_std: f64,
}

/// Discounted return of one action sequence from `z0` (shape (1, L)):
/// `Σ_{i<H} γ^i R(z_i, a_i) + γ^H V(z_H)`.
pub fn estimate_return(
    model: &dyn LatentModel,
    z0: &Matrix,
    actions: &[Matrix],
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if actions.is_empty() {
        return Err(Error::EmptyInput("estimate_return actions"));
    }
    let scores = score_sequences(model, z0, actions, gamma, rng);
    Ok(scores[0])
}

/// Batched scoring: `actions[i]` is the (B, A) action matrix at step i; `z0`
/// is broadcast to B rows when it has a single row.
fn score_sequences(
    model: &dyn LatentModel,
    z0: &Matrix,
    actions: &[Matrix],
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let b = actions[0].rows;
    let mut z = if z0.rows == b {
        z0.clone()
    } else {
        let mut m = Matrix::zeros(b, z0.cols);
        for r in 0..b {
            m.row_mut(r).copy_from_slice(z0.row(0));
        }
        m
    };
    let mut scores = vec![0.0; b];
    let mut disc = 1.0;
    for a in actions {
        let r = model.reward(&z, a);
        for (s, rv) in scores.iter_mut().zip(&r.data) {
            *s += disc * rv;
        }
        z = model.step(&z, a);
        disc *= gamma;
    }
    let v = model.terminal_value(&z, rng);
    for (s, vv) in scores.iter_mut().zip(&v.data) {
        *s += disc * vv;
    }
    scores
}

/// One planning call. Refines `state` in place and returns the executed
/// action (first mean action, optionally with exploration noise) plus elite
/// diagnostics. Deterministic given `rng` state and the model snapshot.
pub fn plan(
    model: &dyn LatentModel,
    cfg: &PlanConfig,
    z0: &Matrix,
    state: &mut PlanState,
    rng: &mut ChaCha8Rng,
    explore: bool,
) -> Result<(Vec<f64>, PlanDiag)> {
    cfg.validate()?;
    let a_dim = model.act_dim();
    if state.mean.rows != cfg.horizon || state.mean.cols != a_dim {
        return Err(Error::DimMismatch {
            context: "plan: state shape".into(),
            expected: cfg.horizon * a_dim,
            got: state.mean.rows * state.mean.cols,
        });
    }

    if state.initialized {
        let pad_z = {
            // Predict the latent at the end of the shifted mean sequence and
            // pad with the prior's action there.
            let mut z = z0.clone();
            for i in 1..cfg.horizon {
                let a = Matrix::row_vec(state.mean.row(i).to_vec());
                z = model.step(&z, &a);
            }
            z
        };
        let pad = model.prior_mean(&pad_z);
        state.shift_and_pad(pad.row(0), cfg);
    }

    // Policy-prior candidates, rolled once and reused across iterations.
    let n_prior = cfg.num_prior_samples;
    let mut prior_actions: Vec<Matrix> = Vec::new();
    if n_prior > 0 {
        let mut z = Matrix::zeros(n_prior, z0.cols);
        for r in 0..n_prior {
            z.row_mut(r).copy_from_slice(z0.row(0));
        }
        for _ in 0..cfg.horizon {
            let a = model.prior_action(&z, rng).map(|v| v.clamp(-1.0, 1.0));
            z = model.step(&z, &a);
            prior_actions.push(a);
        }
    }

    let n_gauss = cfg.num_samples;
    let total = n_gauss + n_prior;
    let mut diag = PlanDiag::default();
    for _ in 0..cfg.iterations {
        // Candidate actions per step: Gaussian rows then prior rows.
        let mut step_actions: Vec<Matrix> = Vec::with_capacity(cfg.horizon);
        for i in 0..cfg.horizon {
            let mut a = Matrix::zeros(total, a_dim);
            for r in 0..n_gauss {
                for c in 0..a_dim {
                    let v = state.mean.at(i, c) + state.std.at(i, c) * sample_standard_normal(rng);
                    *a.at_mut(r, c) = v.clamp(-1.0, 1.0);
                }
            }
            for r in 0..n_prior {
                a.row_mut(n_gauss + r).copy_from_slice(prior_actions[i].row(r));
            }
            step_actions.push(a);
        }

        let scores = score_sequences(model, z0, &step_actions, cfg.gamma, rng);

        // Top-k elites by score.
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).expect("finite plan scores"));
        let elites = &order[..cfg.num_elites];
        let s_max = scores[elites[0]];
        let weights: Vec<f64> =
            elites.iter().map(|&e| ((scores[e] - s_max) / cfg.temperature).exp()).collect();
        let w_sum: f64 = weights.iter().sum();

        let elite_scores: Vec<f64> = elites.iter().map(|&e| scores[e]).collect();
        let em = elite_scores.iter().sum::<f64>() / elite_scores.len() as f64;
        let ev = elite_scores.iter().map(|s| (s - em) * (s - em)).sum::<f64>()
            / elite_scores.len() as f64;
        diag = PlanDiag { elite_mean: em, elite_std: ev.sqrt() };

        for i in 0..cfg.horizon {
            for c in 0..a_dim {
                let mut m = 0.0;
                for (&e, w) in elites.iter().zip(&weights) {
                    m += w * step_actions[i].at(e, c);
                }
                m /= w_sum;
                let mut var = 0.0;
                for (&e, w) in elites.iter().zip(&weights) {
                    let d = step_actions[i].at(e, c) - m;
                    var += w * d * d;
                }
                var /= w_sum;
                *state.mean.at_mut(i, c) = m;
                *state.std.at_mut(i, c) = var.sqrt().clamp(cfg.min_std, cfg.max_std);
            }
        }
    }
    state.initialized = true;

    let mut action: Vec<f64> = state.mean.row(0).to_vec();
    if explore && cfg.exploration_std > 0.0 {
        for v in &mut action {
            *v += cfg.exploration_std * sample_standard_normal(rng);
        }
    }
    for v in &mut action {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok((action, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Identity dynamics, quadratic action reward, constant terminal value,
    /// zero prior. The optimum of each step's reward is `a_star`.
    struct QuadraticToy {
        a_star: Vec<f64>,
        q_const: f64,
    }

    impl LatentModel for QuadraticToy {
        fn act_dim(&self) -> usize {
            self.a_star.len()
        }
        fn step(&self, z: &Matrix, _a: &Matrix) -> Matrix {
            z.clone()
        }
        fn reward(&self, z: &Matrix, a: &Matrix) -> Matrix {
            let mut r = Matrix::zeros(z.rows, 1);
            for b in 0..z.rows {
                let mut s = 0.0;
                for (c, &t) in self.a_star.iter().enumerate() {
                    let d = a.at(b, c) - t;
                    s -= d * d;
                }
                r.data[b] = s;
            }
            r
        }
        fn terminal_value(&self, z: &Matrix, _rng: &mut ChaCha8Rng) -> Matrix {
            Matrix::zeros(z.rows, 1).map(|_| self.q_const)
        }
        fn prior_action(&self, z: &Matrix, _rng: &mut ChaCha8Rng) -> Matrix {
            Matrix::zeros(z.rows, self.a_star.len())
        }
        fn prior_mean(&self, z: &Matrix) -> Matrix {
            Matrix::zeros(z.rows, self.a_star.len())
        }
    }

    fn toy_cfg() -> PlanConfig {
        PlanConfig {
            horizon: 3,
            num_samples: 256,
            num_prior_samples: 8,
            num_elites: 32,
            iterations: 6,
            ..PlanConfig::default()
        }
    }

    #[test]
    fn estimate_return_matches_closed_form() {
        let toy = QuadraticToy { a_star: vec![0.3, -0.2], q_const: 0.0 };
        let z0 = Matrix::row_vec(vec![0.0, 0.0]);
        let actions: Vec<Matrix> = vec![
            Matrix::row_vec(vec![0.1, 0.1]),
            Matrix::row_vec(vec![0.5, -0.5]),
            Matrix::row_vec(vec![0.3, -0.2]),
        ];
        let gamma = 0.9;
        let mut r = rng::stream(1, "er");
        let got = estimate_return(&toy, &z0, &actions, gamma, &mut r).unwrap();
        let step = |a: &Matrix| -> f64 {
            let d0 = a.at(0, 0) - 0.3;
            let d1 = a.at(0, 1) + 0.2;
            -(d0 * d0 + d1 * d1)
        };
        let want = step(&actions[0]) + gamma * step(&actions[1]) + gamma * gamma * step(&actions[2]);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn estimate_return_terminal_and_discount_edges() {
        // R ≡ 0 (a* unreachable contributes via constant? here force R = 0 by
        // matching a_star exactly), so H=1 leaves only the γ·Q term.
        let toy = QuadraticToy { a_star: vec![0.0], q_const: 2.5 };
        let z0 = Matrix::row_vec(vec![0.0]);
        let actions = vec![Matrix::row_vec(vec![0.0])];
        let mut r = rng::stream(2, "er");
        let got = estimate_return(&toy, &z0, &actions, 0.9, &mut r).unwrap();
        assert!((got - 0.9 * 2.5).abs() < 1e-12);

        // γ = 0 with multiple steps reduces to R(z0, a0): γ^H · V is 0 too.
        let toy2 = QuadraticToy { a_star: vec![0.5], q_const: 7.0 };
        let actions2 = vec![Matrix::row_vec(vec![0.1]), Matrix::row_vec(vec![0.9])];
        let got2 = estimate_return(&toy2, &z0, &actions2, 0.0, &mut r).unwrap();
        let d = 0.1 - 0.5;
        assert!((got2 - (-(d * d))).abs() < 1e-12);
    }

    #[test]
    fn plan_finds_known_optimum_over_seeds() {
        let toy = QuadraticToy { a_star: vec![0.3, -0.2], q_const: 0.0 };
        let cfg = toy_cfg();
        let z0 = Matrix::row_vec(vec![0.0, 0.0]);
        for seed in 0..5 {
            let mut state = PlanState::new(&cfg, 2);
            let mut r = rng::indexed_stream(seed, "plan", seed);
            let (a, diag) = plan(&toy, &cfg, &z0, &mut state, &mut r, false).unwrap();
            assert!((a[0] - 0.3).abs() < 0.05 && (a[1] + 0.2).abs() < 0.05, "seed {seed}: {a:?}");
            assert!(diag.elite_mean.is_finite());
        }
    }

    #[test]
    fn plan_respects_action_bounds_with_out_of_range_optimum() {
        let toy = QuadraticToy { a_star: vec![1.5, -1.5], q_const: 0.0 };
        let cfg = toy_cfg();
        let z0 = Matrix::row_vec(vec![0.0, 0.0]);
        let mut state = PlanState::new(&cfg, 2);
        let mut r = rng::stream(9, "plan");
        let (a, _) = plan(&toy, &cfg, &z0, &mut state, &mut r, true).unwrap();
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)), "{a:?}");
        // The clamped optimum sits at the box corner.
        assert!(a[0] > 0.9 && a[1] < -0.9, "{a:?}");
    }

    #[test]
    fn zero_iterations_returns_running_mean_unchanged() {
        let toy = QuadraticToy { a_star: vec![0.4], q_const: 0.0 };
        let cfg = PlanConfig { iterations: 0, horizon: 2, ..toy_cfg() };
        let z0 = Matrix::row_vec(vec![0.0]);
        let mut state = PlanState::new(&cfg, 1);
        *state.mean.at_mut(0, 0) = 0.25;
        let mut r = rng::stream(3, "plan");
        let (a, diag) = plan(&toy, &cfg, &z0, &mut state, &mut r, false).unwrap();
        assert_eq!(a, vec![0.25], "no refinement leaves the prior mean");
        assert_eq!(diag.elite_mean, 0.0);
    }

    #[test]
    fn plan_is_deterministic_given_seed() {
        let toy = QuadraticToy { a_star: vec![0.3, -0.2], q_const: 1.0 };
        let cfg = toy_cfg();
        let z0 = Matrix::row_vec(vec![0.1, 0.2]);
        let run = || {
            let mut state = PlanState::new(&cfg, 2);
            let mut r = rng::stream(42, "plan");
            let (a1, _) = plan(&toy, &cfg, &z0, &mut state, &mut r, true).unwrap();
            let (a2, _) = plan(&toy, &cfg, &z0, &mut state, &mut r, true).unwrap();
            (a1, a2)
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn elite_mean_is_nondecreasing_across_iterations() {
        // Re-run the same landscape with increasing iteration counts; on a
        // smooth quadratic the final elite mean must not degrade.
        let toy = QuadraticToy { a_star: vec![0.3, -0.2], q_const: 0.0 };
        let z0 = Matrix::row_vec(vec![0.0, 0.0]);
        let mut prev = f64::NEG_INFINITY;
        for iters in 1..=6 {
            let cfg = PlanConfig { iterations: iters, ..toy_cfg() };
            let mut state = PlanState::new(&cfg, 2);
            let mut r = rng::stream(7, "plan");
            let (_, diag) = plan(&toy, &cfg, &z0, &mut state, &mut r, false).unwrap();
            assert!(
                diag.elite_mean >= prev - 1e-9,
                "iteration {iters}: {} < {prev}",
                diag.elite_mean
            );
            prev = diag.elite_mean;
        }
    }

    #[test]
    fn warm_start_shifts_mean_and_pads_with_prior() {
        let cfg = PlanConfig { horizon: 3, ..toy_cfg() };
        let mut state = PlanState::new(&cfg, 2);
        state.mean = Matrix::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        state.std = state.std.map(|_| 0.07);
        state.shift_and_pad(&[0.9, -0.9], &cfg);
        assert_eq!(state.mean.row(0), &[0.3, 0.4]);
        assert_eq!(state.mean.row(1), &[0.5, 0.6]);
        assert_eq!(state.mean.row(2), &[0.9, -0.9]);
        assert!(state.std.data.iter().all(|&s| s == cfg.max_std), "std resets to max");

        // A second planner call on an initialized state performs the shift
        // internally: with zero iterations the returned action is the old
        // second-step mean (prior pads with zeros on this toy).
        let toy = QuadraticToy { a_star: vec![0.0, 0.0], q_const: 0.0 };
        let z0 = Matrix::row_vec(vec![0.0, 0.0]);
        let cfg0 = PlanConfig { iterations: 0, horizon: 3, ..toy_cfg() };
        let mut st = PlanState::new(&cfg0, 2);
        st.mean = Matrix::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut r = rng::stream(4, "plan");
        let (first, _) = plan(&toy, &cfg0, &z0, &mut st, &mut r, false).unwrap();
        assert_eq!(first, vec![0.1, 0.2], "fresh state is not shifted");
        let (second, _) = plan(&toy, &cfg0, &z0, &mut st, &mut r, false).unwrap();
        assert_eq!(second, vec![0.3, 0.4], "initialized state shifts by one");
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = PlanConfig::default();
        assert!(ok.validate().is_ok());
        assert!(PlanConfig { horizon: 0, ..ok.clone() }.validate().is_err());
        assert!(PlanConfig { num_elites: 0, ..ok.clone() }.validate().is_err());
        assert!(
            PlanConfig { num_elites: 1000, num_samples: 10, num_prior_samples: 0, ..ok.clone() }
                .validate()
                .is_err()
        );
        assert!(PlanConfig { temperature: 0.0, ..ok.clone() }.validate().is_err());
        assert!(PlanConfig { min_std: 0.5, max_std: 0.1, ..ok.clone() }.validate().is_err());
        assert!(PlanConfig { exploration_std: -0.1, ..ok.clone() }.validate().is_err());
        assert!(PlanConfig { gamma: 1.5, ..ok }.validate().is_err());
    }
}
