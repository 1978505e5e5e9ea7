//! Typed run configuration: one flat namespace of `key = value` settings
//! covering the environment, model shapes, loss weights, optimizer rates,
//! planner, pretraining, schedule and ablation switches.
//!
//! [`TrainConfig::set`] is the single place a textual key is interpreted, so
//! unknown keys are rejected uniformly no matter where the text came from,
//! and [`TrainConfig::to_flat`] serializes every key back out so a run
//! directory is reproducible from its stored config alone.

use crate::envs::{env_spec, stage_granularity_variant, EnvSpec};
use crate::error::{Error, Result};
use crate::planner::PlanConfig;
use crate::rewardlearn::{validate_beta, BETA_DEFAULT};
use crate::worldmodel::{LatentNorm, LogStdBounds, WmConfig, WmLossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    /// 0 keeps the task's native stage count; n > 0 selects the n-granular
    /// reward variant of the same task.
    pub granularity: u32,
    pub seed: u64,
    pub budget_steps: usize,
    pub demo_count: usize,
    /// Demonstration file location; empty selects a path derived from env,
    /// granularity, demo count and seed under the run root.
    pub demo_path: String,

    pub capacity_steps: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub demo_ratio: f64,

    pub latent_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub n_q: usize,
    pub latent_norm: String,
    pub simnorm_group: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,

    pub lambda: f64,
    pub consistency_coef: f64,
    pub reward_coef: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub q_momentum: f64,

    pub lr_model: f64,
    pub lr_encoder: f64,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub grad_clip: f64,

    pub beta: f64,
    pub disc_hidden: usize,

    pub alpha0: f64,

    pub plan_horizon: usize,
    pub plan_samples: usize,
    pub plan_prior_samples: usize,
    pub plan_elites: usize,
    pub plan_iterations: usize,
    pub plan_temperature: f64,
    pub plan_min_std: f64,
    pub plan_max_std: f64,
    pub plan_exploration_std: f64,

    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_interval: usize,

    pub bc_steps: usize,
    pub bc_batch_size: usize,
    pub bc_lr: f64,
    pub bc_eval_interval: usize,
    pub bc_eval_episodes: usize,
    pub bc_patience: usize,
    pub bc_log_std_min: f64,
    pub bc_log_std_max: f64,

    pub no_learned_reward: bool,
    pub no_pretrain: bool,
    /// Reserved extension point: two-hot discrete regression for reward and
    /// value heads. Not implemented; enabling it is a configuration error.
    pub discrete_regression: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "grasp-place".into(),
            granularity: 0,
            seed: 0,
            budget_steps: 30_000,
            demo_count: 5,
            demo_path: String::new(),

            capacity_steps: 300_000,
            batch_size: 256,
            horizon: 3,
            demo_ratio: 0.5,

            latent_dim: 64,
            width: 128,
            hidden_layers: 1,
            n_q: 3,
            latent_norm: "simnorm".into(),
            simnorm_group: 8,
            log_std_min: -10.0,
            log_std_max: 2.0,

            lambda: 0.5,
            consistency_coef: 20.0,
            reward_coef: 0.1,
            value_coef: 0.1,
            entropy_coef: 1e-4,
            gamma: 0.99,
            q_momentum: 0.99,

            lr_model: 3e-4,
            lr_encoder: 1e-4,
            lr_policy: 3e-4,
            lr_disc: 3e-4,
            grad_clip: 10.0,

            beta: BETA_DEFAULT,
            disc_hidden: 32,

            alpha0: 5e-5,

            plan_horizon: 3,
            plan_samples: 512,
            plan_prior_samples: 24,
            plan_elites: 64,
            plan_iterations: 6,
            plan_temperature: 0.5,
            plan_min_std: 0.05,
            plan_max_std: 2.0,
            plan_exploration_std: 0.05,

            eval_interval: 2500,
            eval_episodes: 20,
            checkpoint_interval: 10_000,

            bc_steps: 3000,
            bc_batch_size: 64,
            bc_lr: 3e-4,
            bc_eval_interval: 500,
            bc_eval_episodes: 20,
            bc_patience: 10,
            bc_log_std_min: -5.0,
            bc_log_std_max: 2.0,

            no_learned_reward: false,
            no_pretrain: false,
            discrete_regression: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::InvalidConfig(format!("key '{key}': cannot parse '{value}'"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!("key '{key}': '{other}' is not a boolean"))),
    }
}

impl TrainConfig {
    /// Apply one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.trim().to_string(),
            "granularity" => self.granularity = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "budget_steps" => self.budget_steps = parse(key, value)?,
            "demo_count" => self.demo_count = parse(key, value)?,
            "demo_path" => self.demo_path = value.trim().to_string(),
            "capacity_steps" => self.capacity_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "demo_ratio" => self.demo_ratio = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "hidden_layers" => self.hidden_layers = parse(key, value)?,
            "n_q" => self.n_q = parse(key, value)?,
            "latent_norm" => self.latent_norm = value.trim().to_string(),
            "simnorm_group" => self.simnorm_group = parse(key, value)?,
            "log_std_min" => self.log_std_min = parse(key, value)?,
            "log_std_max" => self.log_std_max = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "consistency_coef" => self.consistency_coef = parse(key, value)?,
            "reward_coef" => self.reward_coef = parse(key, value)?,
            "value_coef" => self.value_coef = parse(key, value)?,
            "entropy_coef" => self.entropy_coef = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "q_momentum" => self.q_momentum = parse(key, value)?,
            "lr_model" => self.lr_model = parse(key, value)?,
            "lr_encoder" => self.lr_encoder = parse(key, value)?,
            "lr_policy" => self.lr_policy = parse(key, value)?,
            "lr_disc" => self.lr_disc = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "disc_hidden" => self.disc_hidden = parse(key, value)?,
            "alpha0" => self.alpha0 = parse(key, value)?,
            "plan_horizon" => self.plan_horizon = parse(key, value)?,
            "plan_samples" => self.plan_samples = parse(key, value)?,
            "plan_prior_samples" => self.plan_prior_samples = parse(key, value)?,
            "plan_elites" => self.plan_elites = parse(key, value)?,
            "plan_iterations" => self.plan_iterations = parse(key, value)?,
            "plan_temperature" => self.plan_temperature = parse(key, value)?,
            "plan_min_std" => self.plan_min_std = parse(key, value)?,
            "plan_max_std" => self.plan_max_std = parse(key, value)?,
            "plan_exploration_std" => self.plan_exploration_std = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "bc_steps" => self.bc_steps = parse(key, value)?,
            "bc_batch_size" => self.bc_batch_size = parse(key, value)?,
            "bc_lr" => self.bc_lr = parse(key, value)?,
            "bc_eval_interval" => self.bc_eval_interval = parse(key, value)?,
            "bc_eval_episodes" => self.bc_eval_episodes = parse(key, value)?,
            "bc_patience" => self.bc_patience = parse(key, value)?,
            "bc_log_std_min" => self.bc_log_std_min = parse(key, value)?,
            "bc_log_std_max" => self.bc_log_std_max = parse(key, value)?,
            "no_learned_reward" => self.no_learned_reward = parse_bool(key, value)?,
            "no_pretrain" => self.no_pretrain = parse_bool(key, value)?,
            "discrete_regression" => self.discrete_regression = parse_bool(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        env_spec(&self.env)?;
        self.resolved_env_spec()?;
        if self.discrete_regression {
            return Err(Error::InvalidConfig(
                "discrete_regression is a reserved extension and not implemented; \
                 reward/value heads use scalar regression"
                    .into(),
            ));
        }
        validate_beta(self.beta)?;
        if !(0.0..=1.0).contains(&self.demo_ratio) {
            return Err(Error::InvalidConfig(format!(
                "demo_ratio {} outside [0, 1]",
                self.demo_ratio
            )));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.capacity_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, horizon and capacity_steps must be positive".into(),
            ));
        }
        if self.alpha0 <= 0.0 {
            return Err(Error::InvalidConfig("alpha0 must be positive".into()));
        }
        for (name, lr) in [
            ("lr_model", self.lr_model),
            ("lr_encoder", self.lr_encoder),
            ("lr_policy", self.lr_policy),
            ("lr_disc", self.lr_disc),
            ("bc_lr", self.bc_lr),
        ] {
            if lr <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {lr}")));
            }
        }
        let spec = self.resolved_env_spec()?;
        self.wm_config(&spec)?.validate()?;
        self.loss_weights().validate()?;
        self.plan_config().validate()?;
        self.bc_config().validate()?;
        if self.eval_interval == 0 || self.eval_episodes == 0 || self.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig(
                "eval_interval, eval_episodes and checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Environment spec with the granularity variant applied.
    pub fn resolved_env_spec(&self) -> Result<EnvSpec> {
        let base = env_spec(&self.env)?;
        if self.granularity == 0 {
            Ok(base)
        } else {
            stage_granularity_variant(&base, self.granularity)
        }
    }

    pub fn latent_norm(&self) -> Result<LatentNorm> {
        match self.latent_norm.as_str() {
            "simnorm" => Ok(LatentNorm::SimNorm(self.simnorm_group)),
            "l2" => Ok(LatentNorm::L2),
            other => Err(Error::InvalidConfig(format!(
                "latent_norm '{other}' (expected 'simnorm' or 'l2')"
            ))),
        }
    }

    pub fn wm_config(&self, spec: &EnvSpec) -> Result<WmConfig> {
        Ok(WmConfig {
            obs_dim: spec.observation_dim,
            act_dim: spec.action_dim,
            latent_dim: self.latent_dim,
            width: self.width,
            hidden_layers: self.hidden_layers,
            n_q: self.n_q,
            latent_norm: self.latent_norm()?,
            log_std: LogStdBounds { min: self.log_std_min, max: self.log_std_max },
        })
    }

    pub fn loss_weights(&self) -> WmLossWeights {
        WmLossWeights {
            lambda: self.lambda,
            consistency_coef: self.consistency_coef,
            reward_coef: self.reward_coef,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            gamma: self.gamma,
            q_momentum: self.q_momentum,
        }
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            horizon: self.plan_horizon,
            num_samples: self.plan_samples,
            num_prior_samples: self.plan_prior_samples,
            num_elites: self.plan_elites,
            iterations: self.plan_iterations,
            temperature: self.plan_temperature,
            min_std: self.plan_min_std,
            max_std: self.plan_max_std,
            exploration_std: self.plan_exploration_std,
            gamma: self.gamma,
        }
    }

    pub fn bc_config(&self) -> crate::bc::BcConfig {
        crate::bc::BcConfig {
            steps: self.bc_steps,
            batch_size: self.bc_batch_size,
            lr: self.bc_lr,
            eval_interval: self.bc_eval_interval,
            eval_episodes: self.bc_eval_episodes,
            patience: self.bc_patience,
            log_std: LogStdBounds { min: self.bc_log_std_min, max: self.bc_log_std_max },
        }
    }

    /// Serialize every key as `key = value`, one per line, in a fixed order.
    /// `set` on a default config reproduces `self` from this text.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("env", self.env.clone());
        kv("granularity", self.granularity.to_string());
        kv("seed", self.seed.to_string());
        kv("budget_steps", self.budget_steps.to_string());
        kv("demo_count", self.demo_count.to_string());
        kv("demo_path", self.demo_path.clone());
        kv("capacity_steps", self.capacity_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("horizon", self.horizon.to_string());
        kv("demo_ratio", self.demo_ratio.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("width", self.width.to_string());
        kv("hidden_layers", self.hidden_layers.to_string());
        kv("n_q", self.n_q.to_string());
        kv("latent_norm", self.latent_norm.clone());
        kv("simnorm_group", self.simnorm_group.to_string());
        kv("log_std_min", self.log_std_min.to_string());
        kv("log_std_max", self.log_std_max.to_string());
        kv("lambda", self.lambda.to_string());
        kv("consistency_coef", self.consistency_coef.to_string());
        kv("reward_coef", self.reward_coef.to_string());
        kv("value_coef", self.value_coef.to_string());
        kv("entropy_coef", self.entropy_coef.to_string());
        kv("gamma", self.gamma.to_string());
        kv("q_momentum", self.q_momentum.to_string());
        kv("lr_model", self.lr_model.to_string());
        kv("lr_encoder", self.lr_encoder.to_string());
        kv("lr_policy", self.lr_policy.to_string());
        kv("lr_disc", self.lr_disc.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("beta", self.beta.to_string());
        kv("disc_hidden", self.disc_hidden.to_string());
        kv("alpha0", self.alpha0.to_string());
        kv("plan_horizon", self.plan_horizon.to_string());
        kv("plan_samples", self.plan_samples.to_string());
        kv("plan_prior_samples", self.plan_prior_samples.to_string());
        kv("plan_elites", self.plan_elites.to_string());
        kv("plan_iterations", self.plan_iterations.to_string());
        kv("plan_temperature", self.plan_temperature.to_string());
        kv("plan_min_std", self.plan_min_std.to_string());
        kv("plan_max_std", self.plan_max_std.to_string());
        kv("plan_exploration_std", self.plan_exploration_std.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("bc_steps", self.bc_steps.to_string());
        kv("bc_batch_size", self.bc_batch_size.to_string());
        kv("bc_lr", self.bc_lr.to_string());
        kv("bc_eval_interval", self.bc_eval_interval.to_string());
        kv("bc_eval_episodes", self.bc_eval_episodes.to_string());
        kv("bc_patience", self.bc_patience.to_string());
        kv("bc_log_std_min", self.bc_log_std_min.to_string());
        kv("bc_log_std_max", self.bc_log_std_max.to_string());
        kv("no_learned_reward", self.no_learned_reward.to_string());
        kv("no_pretrain", self.no_pretrain.to_string());
        kv("discrete_regression", self.discrete_regression.to_string());
        s
    }
}
