//! Multi-stage 2D point-mass manipulation tasks.
//!
//! Three tasks share one simulator: `reach` (1 stage), `grasp-place`
//! (2 stages) and `grasp-lift-place` (3 stages). The agent is a point gripper
//! moving in the unit square; an object attaches rigidly while the gripper is
//! nearly closed within grasping range and detaches when it opens, so
//! trajectories can regress to earlier stages (dropped object). Stage
//! indicators are pure functions of simulator state.
//!
//! There is no gravity or contact simulation: the object moves only while
//! attached. This is deliberate — the training machinery under test is
//! agnostic to physics fidelity, and these dynamics keep episodes cheap and
//! exactly reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Gripper-to-object distance below which a closed gripper grasps.
pub const GRASP_EPS: f64 = 0.05;
/// Aperture below which the gripper counts as closed.
pub const GRASP_APERTURE: f64 = 0.1;
/// Height the object must exceed (while grasped) for the "lifted" stage.
pub const LIFT_HEIGHT: f64 = 0.0;
/// Default episode length.
pub const DEFAULT_HORIZON: usize = 100;

const AGENT_SPEED: f64 = 0.1;
const APERTURE_RATE: f64 = 0.35;
/// Proportional gain of the scripted expert.
const EXPERT_GAIN: f64 = 4.0;
/// Expert stops approaching and starts closing inside this distance.
const EXPERT_CLOSE_DIST: f64 = 0.035;
/// Magnitude of the expert's gripper command, kept strictly inside the
/// action bounds so the pre-squash value stays moderate.
const EXPERT_GRIP: f64 = 0.995;

/// Flat observation vector; layout documented per task in
/// [`stage_reference_doc`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Vec<f64>,
}

/// Continuous action in `[-1, 1]^A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub components: Vec<f64>,
}

impl Action {
    /// Construct with every component clamped into `[-1, 1]`.
    pub fn clamped(components: Vec<f64>) -> Self {
        Action { components: components.into_iter().map(|c| c.clamp(-1.0, 1.0)).collect() }
    }

    pub fn zeros(dim: usize) -> Self {
        Action { components: vec![0.0; dim] }
    }
}

/// Integer stage reward in `{0, …, N}`; `N` is task success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StageReward(pub u32);

impl StageReward {
    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

/// Static description of an environment configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    /// Base task name: `reach`, `grasp-place` or `grasp-lift-place`.
    pub name: String,
    /// Number of distinguishable non-zero stages exposed by rewards
    /// (equals `stage_granularity`; rewards take values in `{0, …, n_stages}`).
    pub n_stages: u32,
    pub observation_dim: usize,
    pub action_dim: usize,
    pub episode_horizon: usize,
    /// How many stages (including success) the reward distinguishes; at most
    /// the base task's stage count.
    pub stage_granularity: u32,
}

impl EnvSpec {
    /// Stable hash over every field, used to tie demonstration files to the
    /// environment that produced them.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.name.as_bytes());
        eat(&self.n_stages.to_le_bytes());
        eat(&(self.observation_dim as u64).to_le_bytes());
        eat(&(self.action_dim as u64).to_le_bytes());
        eat(&(self.episode_horizon as u64).to_le_bytes());
        eat(&self.stage_granularity.to_le_bytes());
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Reach,
    GraspPlace,
    GraspLiftPlace,
}

impl Task {
    fn from_name(name: &str) -> Result<Task> {
        Ok(match name {
            "reach" => Task::Reach,
            "grasp-place" => Task::GraspPlace,
            "grasp-lift-place" => Task::GraspLiftPlace,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown environment {other:?}; expected one of reach, grasp-place, grasp-lift-place"
                )))
            }
        })
    }

    fn base_stages(self) -> u32 {
        match self {
            Task::Reach => 1,
            Task::GraspPlace => 2,
            Task::GraspLiftPlace => 3,
        }
    }

    fn dims(self) -> (usize, usize) {
        match self {
            Task::Reach => (8, 2),
            Task::GraspPlace | Task::GraspLiftPlace => (14, 3),
        }
    }
}

pub fn task_names() -> [&'static str; 3] {
    ["reach", "grasp-place", "grasp-lift-place"]
}

/// Spec of a base task at full stage granularity.
pub fn env_spec(name: &str) -> Result<EnvSpec> {
    let task = Task::from_name(name)?;
    let (observation_dim, action_dim) = task.dims();
    Ok(EnvSpec {
        name: name.to_string(),
        n_stages: task.base_stages(),
        observation_dim,
        action_dim,
        episode_horizon: DEFAULT_HORIZON,
        stage_granularity: task.base_stages(),
    })
}

/// Coarsen `spec` so rewards distinguish only `n` stages (success included);
/// the success criterion itself is unchanged. Intermediate stages merge from
/// the top: with `n`, raw stage `s < N` maps to `min(s, n-1)` and raw `N`
/// maps to `n`.
pub fn stage_granularity_variant(spec: &EnvSpec, n: u32) -> Result<EnvSpec> {
    let base = Task::from_name(&spec.name)?.base_stages();
    if n == 0 || n > base {
        return Err(Error::InvalidConfig(format!(
            "stage granularity {n} out of range 1..={base} for {}",
            spec.name
        )));
    }
    Ok(EnvSpec { n_stages: n, stage_granularity: n, ..spec.clone() })
}

/// One environment instance. Construct via [`make_env`], drive with
/// [`StageEnv::reset`] / [`StageEnv::step`].
#[derive(Debug, Clone)]
pub struct StageEnv {
    spec: EnvSpec,
    task: Task,
    p: [f64; 2],
    v: [f64; 2],
    aperture: f64,
    obj: [f64; 2],
    attached: bool,
    goal: [f64; 2],
    t: usize,
    done: bool,
}

/// Build an environment from its spec, validating the spec against the task
/// registry so stale or hand-edited specs fail loudly.
pub fn make_env(spec: &EnvSpec) -> Result<StageEnv> {
    let task = Task::from_name(&spec.name)?;
    let canonical = env_spec(&spec.name)?;
    if (spec.observation_dim, spec.action_dim) != (canonical.observation_dim, canonical.action_dim) {
        return Err(Error::SpecMismatch {
            expected: format!(
                "{}: obs dim {}, action dim {}",
                spec.name, canonical.observation_dim, canonical.action_dim
            ),
            got: format!("obs dim {}, action dim {}", spec.observation_dim, spec.action_dim),
        });
    }
    if spec.stage_granularity == 0
        || spec.stage_granularity > task.base_stages()
        || spec.n_stages != spec.stage_granularity
    {
        return Err(Error::InvalidConfig(format!(
            "invalid stage granularity {} (n_stages {}) for {}",
            spec.stage_granularity, spec.n_stages, spec.name
        )));
    }
    if spec.episode_horizon == 0 {
        return Err(Error::InvalidConfig("episode_horizon must be positive".into()));
    }
    Ok(StageEnv {
        spec: spec.clone(),
        task,
        p: [0.0; 2],
        v: [0.0; 2],
        aperture: 1.0,
        obj: [0.0; 2],
        attached: false,
        goal: [0.0; 2],
        t: 0,
        done: true,
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl StageEnv {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Start a new episode. Initial positions are drawn from per-task uniform
    /// ranges (documented in [`stage_reference_doc`]); the same seed always
    /// produces the same state.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut r = rng::stream(seed, &self.spec.name);
        let mut uni = |lo: f64, hi: f64| r.gen_range(lo..hi);
        match self.task {
            Task::Reach => {
                self.p = [uni(-0.9, -0.1), uni(-0.9, -0.1)];
                self.goal = [uni(0.1, 0.9), uni(0.1, 0.9)];
                self.obj = self.goal;
            }
            Task::GraspPlace => {
                self.p = [uni(-0.9, -0.5), uni(-0.9, -0.5)];
                self.obj = [uni(-0.4, 0.2), uni(-0.6, 0.0)];
                self.goal = [uni(0.3, 0.8), uni(0.3, 0.8)];
            }
            Task::GraspLiftPlace => {
                self.p = [uni(-0.9, -0.6), uni(-0.9, -0.6)];
                self.obj = [uni(-0.5, 0.3), uni(-0.8, -0.3)];
                self.goal = [uni(0.2, 0.8), uni(0.45, 0.85)];
            }
        }
        self.v = [0.0; 2];
        self.aperture = 1.0;
        self.attached = false;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    /// Advance one step. Returns the next observation, the (granularity-
    /// mapped) stage reward of the new state, and the done flag. Done fires
    /// on task success or when the horizon is reached.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, StageReward, bool)> {
        if self.done {
            return Err(Error::EpisodeExhausted);
        }
        if action.components.len() != self.spec.action_dim {
            return Err(Error::DimMismatch {
                context: format!("action for {}", self.spec.name),
                expected: self.spec.action_dim,
                got: action.components.len(),
            });
        }
        let a: Vec<f64> = action.components.iter().map(|c| c.clamp(-1.0, 1.0)).collect();

        let before = self.p;
        self.p[0] = (self.p[0] + AGENT_SPEED * a[0]).clamp(-1.0, 1.0);
        self.p[1] = (self.p[1] + AGENT_SPEED * a[1]).clamp(-1.0, 1.0);
        self.v = [self.p[0] - before[0], self.p[1] - before[1]];

        if self.task != Task::Reach {
            self.aperture = (self.aperture + APERTURE_RATE * a[2]).clamp(0.0, 1.0);
            if self.attached {
                if self.aperture >= GRASP_APERTURE {
                    self.attached = false; // dropped: stage indicators regress
                } else {
                    self.obj = self.p;
                }
            } else if self.aperture < GRASP_APERTURE && dist(self.p, self.obj) < GRASP_EPS {
                self.attached = true;
                self.obj = self.p;
            }
        }

        self.t += 1;
        let raw = self.raw_stage();
        self.done = raw == self.task.base_stages() || self.t >= self.spec.episode_horizon;
        Ok((self.observe(), StageReward(self.exposed_stage(raw)), self.done))
    }

    /// Stage of the current state under the configured granularity.
    pub fn stage(&self) -> StageReward {
        StageReward(self.exposed_stage(self.raw_stage()))
    }

    /// Stage indicator at full granularity, straight from geometry.
    fn raw_stage(&self) -> u32 {
        match self.task {
            Task::Reach => u32::from(dist(self.p, self.goal) < GRASP_EPS),
            Task::GraspPlace => {
                if dist(self.obj, self.goal) < GRASP_EPS {
                    2
                } else if self.attached {
                    1
                } else {
                    0
                }
            }
            Task::GraspLiftPlace => {
                if dist(self.obj, self.goal) < GRASP_EPS {
                    3
                } else if self.attached && self.obj[1] >= LIFT_HEIGHT {
                    2
                } else if self.attached {
                    1
                } else {
                    0
                }
            }
        }
    }

    fn exposed_stage(&self, raw: u32) -> u32 {
        let n = self.spec.stage_granularity;
        if raw == self.task.base_stages() {
            n
        } else {
            raw.min(n - 1)
        }
    }

    fn observe(&self) -> Observation {
        let data = match self.task {
            Task::Reach => vec![
                self.p[0],
                self.p[1],
                self.v[0],
                self.v[1],
                self.goal[0],
                self.goal[1],
                self.goal[0] - self.p[0],
                self.goal[1] - self.p[1],
            ],
            Task::GraspPlace | Task::GraspLiftPlace => vec![
                self.p[0],
                self.p[1],
                self.v[0],
                self.v[1],
                self.aperture,
                f64::from(u8::from(self.attached)),
                self.obj[0],
                self.obj[1],
                self.goal[0],
                self.goal[1],
                self.obj[0] - self.p[0],
                self.obj[1] - self.p[1],
                self.goal[0] - self.obj[0],
                self.goal[1] - self.obj[1],
            ],
        };
        Observation { data }
    }

    /// Scripted expert: a proportional waypoint controller
    /// (approach → close → transport toward goal). Actions are squashed
    /// through tanh rather than hard-clamped so that the pre-squash control
    /// is an affine function of the observation — the exact function class
    /// of a tanh-Gaussian policy, which keeps cloning targets well scaled.
    pub fn expert_action(&self) -> Action {
        let toward = |target: [f64; 2], p: [f64; 2]| {
            [
                (EXPERT_GAIN * (target[0] - p[0])).tanh(),
                (EXPERT_GAIN * (target[1] - p[1])).tanh(),
            ]
        };
        match self.task {
            Task::Reach => {
                let m = toward(self.goal, self.p);
                Action { components: vec![m[0], m[1]] }
            }
            Task::GraspPlace | Task::GraspLiftPlace => {
                let (m, grip) = if self.attached {
                    // Transport: head for the goal with the gripper held shut.
                    (toward(self.goal, self.p), -EXPERT_GRIP)
                } else if dist(self.p, self.obj) > EXPERT_CLOSE_DIST {
                    // Approach with the gripper open.
                    (toward(self.obj, self.p), EXPERT_GRIP)
                } else {
                    // In range: hold still and close.
                    ([0.0, 0.0], -EXPERT_GRIP)
                };
                Action { components: vec![m[0], m[1], grip] }
            }
        }
    }
}

/// Human-readable reference for every task: stage predicates, observation
/// layout, reset ranges and the grasp model. Generated from the same
/// constants the simulator uses so it cannot drift from the code.
pub fn stage_reference_doc() -> String {
    let mut s = String::new();
    s.push_str("# Environment stage reference\n\n");
    s.push_str(&format!(
        "Shared mechanics: the agent is a 2D point gripper; per step it moves by \
{AGENT_SPEED} * action_xy (clamped to the [-1,1] square) and changes aperture by \
{APERTURE_RATE} * action_grip (clamped to [0,1]). An object attaches rigidly when \
aperture < {GRASP_APERTURE} and gripper-object distance < {GRASP_EPS}; it detaches \
(and stage indicators regress) when the gripper reopens. Episodes run at most \
{DEFAULT_HORIZON} steps and end early on success.\n\n"
    ));
    s.push_str("## reach (1 stage, action dim 2)\n");
    s.push_str(&format!(
        "- stage 1 (success): agent within {GRASP_EPS} of the goal.\n\
- observation (dim 8): agent xy, velocity xy, goal xy, goal-agent xy.\n\
- reset ranges: agent U[-0.9,-0.1]^2, goal U[0.1,0.9]^2.\n\n"
    ));
    s.push_str("## grasp-place (2 stages, action dim 3)\n");
    s.push_str(&format!(
        "- stage 1: object grasped (attached).\n\
- stage 2 (success): object within {GRASP_EPS} of the goal.\n\
- observation (dim 14): agent xy, velocity xy, aperture, attached flag, object xy, \
goal xy, object-agent xy, goal-object xy.\n\
- reset ranges: agent U[-0.9,-0.5]^2, object x U[-0.4,0.2] y U[-0.6,0.0], goal U[0.3,0.8]^2.\n\n"
    ));
    s.push_str("## grasp-lift-place (3 stages, action dim 3)\n");
    s.push_str(&format!(
        "- stage 1: object grasped.\n\
- stage 2: grasped and object height >= {LIFT_HEIGHT}.\n\
- stage 3 (success): object within {GRASP_EPS} of the goal (goal heights all exceed \
the lift threshold, so success implies the lift predicate).\n\
- observation (dim 14): as grasp-place.\n\
- reset ranges: agent U[-0.9,-0.6]^2, object x U[-0.5,0.3] y U[-0.8,-0.3], \
goal x U[0.2,0.8] y U[0.45,0.85].\n\n"
    ));
    s.push_str(
        "## Stage granularity variants\n\
With granularity n, raw stage s < N maps to min(s, n-1) and success maps to n; \
the success criterion is unchanged. n=1 yields a pure success indicator.\n",
    );
    s
}
