//! Trajectory storage: replay ring buffer, immutable demonstration set,
//! mixed subsequence sampling with demonstration oversampling, and a binary
//! on-disk format tied to the environment spec.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, EnvSpec, Observation};
use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::rewardlearn::compute_max_stage_labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Demo,
    Rollout,
}

/// One episode: T steps, T+1 observations, suffix-max stage labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<u32>,
    pub labels: Vec<u32>,
    pub seed: u64,
    pub source: Source,
    pub success: bool,
}

impl Trajectory {
    /// Build from a rollout, computing labels from the reward stream.
    pub fn from_rollout(
        observations: Vec<Observation>,
        actions: Vec<Action>,
        rewards: Vec<u32>,
        seed: u64,
        source: Source,
        success: bool,
    ) -> Result<Self> {
        let labels = compute_max_stage_labels(&rewards)?;
        Trajectory::with_labels(observations, actions, rewards, labels, seed, source, success)
    }

    /// Build with externally supplied labels (e.g. loaded from disk),
    /// validating shapes and the suffix-max property.
    #[allow(clippy::too_many_arguments)]
    pub fn with_labels(
        observations: Vec<Observation>,
        actions: Vec<Action>,
        rewards: Vec<u32>,
        labels: Vec<u32>,
        seed: u64,
        source: Source,
        success: bool,
    ) -> Result<Self> {
        let t = actions.len();
        if t == 0 {
            return Err(Error::EmptyInput("trajectory"));
        }
        if observations.len() != t + 1 || rewards.len() != t || labels.len() != t {
            return Err(Error::DimMismatch {
                context: "trajectory step counts".into(),
                expected: t,
                got: observations.len().saturating_sub(1),
            });
        }
        let expected = compute_max_stage_labels(&rewards)?;
        if labels != expected {
            return Err(Error::InvalidLabels(format!(
                "labels {labels:?} violate the suffix-max property; expected {expected:?}"
            )));
        }
        if observations.iter().any(|o| o.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("trajectory observation".into()));
        }
        Ok(Trajectory { observations, actions, rewards, labels, seed, source, success })
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Number of start indices from which a full horizon-`h` subsequence
    /// fits; trajectories shorter than `h` have one clamped start.
    fn valid_starts(&self, h: usize) -> usize {
        if self.len() >= h {
            self.len() - h + 1
        } else {
            1
        }
    }
}

/// A batch of horizon-H subsequences laid out as per-time-index matrices,
/// ready for batched encoding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub horizon: usize,
    pub batch_size: usize,
    /// `observations[i]`: (B, obs_dim), for i in 0..=H.
    pub observations: Vec<Matrix>,
    /// `actions[i]`: (B, act_dim), for i in 0..H.
    pub actions: Vec<Matrix>,
    /// `rewards[i][b]`: sparse stage reward at step i of sample b.
    pub rewards: Vec<Vec<u32>>,
    /// `labels[i][b]`: suffix-max stage label.
    pub labels: Vec<Vec<u32>>,
    /// `valid[i][b]`: false where step i of sample b is right-edge padding
    /// from a trajectory shorter than H.
    pub valid: Vec<Vec<bool>>,
    pub from_demo: Vec<bool>,
}

impl Batch {
    pub fn demo_count(&self) -> usize {
        self.from_demo.iter().filter(|&&d| d).count()
    }
}

/// Ring buffer of rollout trajectories plus an immutable demonstration set.
/// Capacity is counted in steps and enforced by evicting the oldest whole
/// trajectories.
#[derive(Debug)]
pub struct ReplayStore {
    capacity_steps: usize,
    buffer: VecDeque<Trajectory>,
    buffer_steps: usize,
    demos: Vec<Trajectory>,
    /// Dimensions fixed by the first trajectory seen; later mismatches error.
    obs_dim: Option<usize>,
    act_dim: Option<usize>,
}

impl ReplayStore {
    pub fn new(capacity_steps: usize) -> Self {
        ReplayStore {
            capacity_steps,
            buffer: VecDeque::new(),
            buffer_steps: 0,
            demos: Vec::new(),
            obs_dim: None,
            act_dim: None,
        }
    }

    fn check_dims(&mut self, traj: &Trajectory) -> Result<()> {
        let od = traj.observations[0].data.len();
        let ad = traj.actions[0].components.len();
        match (self.obs_dim, self.act_dim) {
            (None, None) => {
                self.obs_dim = Some(od);
                self.act_dim = Some(ad);
            }
            (Some(eod), Some(ead)) => {
                if eod != od || ead != ad {
                    return Err(Error::DimMismatch {
                        context: "trajectory dims vs store".into(),
                        expected: eod,
                        got: od,
                    });
                }
            }
            _ => unreachable!("dims are set together"),
        }
        Ok(())
    }

    /// Install the demonstration set. May be called once, before training.
    pub fn set_demos(&mut self, demos: Vec<Trajectory>) -> Result<()> {
        if !self.demos.is_empty() {
            return Err(Error::InvalidConfig("demonstration set already installed".into()));
        }
        if demos.is_empty() {
            return Err(Error::DemosRequired);
        }
        for d in &demos {
            self.check_dims(d)?;
            // Same validation as insert: stored labels must be consistent.
            let expected = compute_max_stage_labels(&d.rewards)?;
            if d.labels != expected {
                return Err(Error::InvalidLabels("demo labels fail the suffix-max check".into()));
            }
        }
        self.demos = demos;
        Ok(())
    }

    /// Append a rollout trajectory, evicting the oldest whole trajectories
    /// while over capacity.
    pub fn insert(&mut self, traj: Trajectory) -> Result<()> {
        let expected = compute_max_stage_labels(&traj.rewards)?;
        if traj.labels != expected {
            return Err(Error::InvalidLabels(format!(
                "labels {:?} violate the suffix-max property; expected {:?}",
                traj.labels, expected
            )));
        }
        self.check_dims(&traj)?;
        self.buffer_steps += traj.len();
        self.buffer.push_back(traj);
        while self.buffer_steps > self.capacity_steps {
            match self.buffer.pop_front() {
                Some(old) => self.buffer_steps -= old.len(),
                None => break,
            }
        }
        Ok(())
    }

    pub fn demo_trajectories(&self) -> &[Trajectory] {
        &self.demos
    }

    pub fn buffer_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.buffer.iter()
    }

    pub fn buffer_steps(&self) -> usize {
        self.buffer_steps
    }

    pub fn demo_steps(&self) -> usize {
        self.demos.iter().map(|t| t.len()).sum()
    }

    /// Draw a mixed batch: `floor(demo_ratio * batch_size)` subsequences
    /// uniformly from the demo set, the rest uniformly from the buffer
    /// (all from demos while the buffer is empty). "Uniformly" means uniform
    /// over all (trajectory, valid start) pairs.
    pub fn sample_mixed(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        h: usize,
        demo_ratio: f64,
    ) -> Result<Batch> {
        if batch_size == 0 || h == 0 {
            return Err(Error::InvalidConfig("batch_size and horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&demo_ratio) {
            return Err(Error::InvalidConfig(format!("demo_ratio {demo_ratio} outside [0, 1]")));
        }
        if self.demos.is_empty() && demo_ratio > 0.0 {
            return Err(Error::DemosRequired);
        }
        let mut n_demo = (demo_ratio * batch_size as f64).floor() as usize;
        if self.buffer.is_empty() {
            if self.demos.is_empty() {
                return Err(Error::EmptyInput("replay store"));
            }
            n_demo = batch_size;
        }

        let demo_refs: Vec<&Trajectory> = self.demos.iter().collect();
        let buf_refs: Vec<&Trajectory> = self.buffer.iter().collect();
        let mut picks: Vec<(&Trajectory, usize, bool)> = Vec::with_capacity(batch_size);
        for _ in 0..n_demo {
            picks.push(pick_subsequence(&demo_refs, h, rng).map(|(t, s)| (t, s, true))?);
        }
        for _ in n_demo..batch_size {
            picks.push(pick_subsequence(&buf_refs, h, rng).map(|(t, s)| (t, s, false))?);
        }
        Ok(assemble_batch(&picks, h, self.obs_dim.unwrap_or(0), self.act_dim.unwrap_or(0)))
    }
}

/// Uniformly pick one (trajectory, start) pair over all valid pairs.
fn pick_subsequence<'t>(
    trajs: &[&'t Trajectory],
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(&'t Trajectory, usize)> {
    if trajs.is_empty() {
        return Err(Error::EmptyInput("trajectory set"));
    }
    let total: usize = trajs.iter().map(|t| t.valid_starts(h)).sum();
    let mut draw = rng.gen_range(0..total);
    for t in trajs {
        let n = t.valid_starts(h);
        if draw < n {
            return Ok((t, draw));
        }
        draw -= n;
    }
    unreachable!("draw below total")
}

fn assemble_batch(
    picks: &[(&Trajectory, usize, bool)],
    h: usize,
    obs_dim: usize,
    act_dim: usize,
) -> Batch {
    let b = picks.len();
    let mut observations = vec![Matrix::zeros(b, obs_dim); h + 1];
    let mut actions = vec![Matrix::zeros(b, act_dim); h];
    let mut rewards = vec![vec![0u32; b]; h];
    let mut labels = vec![vec![0u32; b]; h];
    let mut valid = vec![vec![false; b]; h];
    let mut from_demo = vec![false; b];

    for (bi, (traj, start, is_demo)) in picks.iter().enumerate() {
        from_demo[bi] = *is_demo;
        let t_len = traj.len();
        for i in 0..h {
            // Right-edge clamp: repeat the final step of short trajectories,
            // marked invalid so losses can mask it.
            let (idx, ok) = if start + i < t_len { (start + i, true) } else { (t_len - 1, false) };
            actions[i].row_mut(bi).copy_from_slice(&traj.actions[idx].components);
            rewards[i][bi] = traj.rewards[idx];
            labels[i][bi] = traj.labels[idx];
            valid[i][bi] = ok;
            observations[i].row_mut(bi).copy_from_slice(&traj.observations[idx].data);
        }
        let last_obs_idx = (start + h).min(t_len);
        observations[h].row_mut(bi).copy_from_slice(&traj.observations[last_obs_idx].data);
    }
    Batch { horizon: h, batch_size: b, observations, actions, rewards, labels, valid, from_demo }
}

/// Roll the scripted expert through one episode and package the result.
pub fn expert_rollout(spec: &EnvSpec, seed: u64, source: Source) -> Result<Trajectory> {
    let mut env = crate::envs::make_env(spec)?;
    let mut observations = vec![env.reset(seed)];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut best = 0;
    loop {
        let a = env.expert_action();
        let (o, r, done) = env.step(&a)?;
        best = best.max(r.0);
        observations.push(o);
        actions.push(a);
        rewards.push(r.0);
        if done {
            break;
        }
    }
    let success = best == spec.n_stages;
    Trajectory::from_rollout(observations, actions, rewards, seed, source, success)
}

const TRAJ_MAGIC: &[u8; 8] = b"SRLTRAJ1";

/// Write trajectories with a header binding them to `spec`.
pub fn save_trajectories(path: &Path, spec: &EnvSpec, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&spec.hash64().to_le_bytes())?;
    w.write_all(&(spec.observation_dim as u32).to_le_bytes())?;
    w.write_all(&(spec.action_dim as u32).to_le_bytes())?;
    w.write_all(&(trajs.len() as u32).to_le_bytes())?;
    for t in trajs {
        w.write_all(&t.seed.to_le_bytes())?;
        w.write_all(&[matches!(t.source, Source::Demo) as u8, t.success as u8])?;
        w.write_all(&(t.len() as u32).to_le_bytes())?;
        for o in &t.observations {
            for v in &o.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for a in &t.actions {
            for v in &a.components {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for r in &t.rewards {
            w.write_all(&r.to_le_bytes())?;
        }
        for l in &t.labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load trajectories, verifying they were produced by an environment with
/// the same spec.
pub fn load_trajectories(path: &Path, spec: &EnvSpec) -> Result<Vec<Trajectory>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TRAJ_MAGIC {
        return Err(Error::Format(format!("{}: not a trajectory file (bad magic)", path.display())));
    }
    let hash = read_u64(&mut r)?;
    if hash != spec.hash64() {
        return Err(Error::SpecMismatch {
            expected: format!("trajectories for env {} (hash {:016x})", spec.name, spec.hash64()),
            got: format!("file written under env hash {hash:016x}"),
        });
    }
    let obs_dim = read_u32(&mut r)? as usize;
    let act_dim = read_u32(&mut r)? as usize;
    if obs_dim != spec.observation_dim || act_dim != spec.action_dim {
        return Err(Error::SpecMismatch {
            expected: format!("obs dim {}, action dim {}", spec.observation_dim, spec.action_dim),
            got: format!("obs dim {obs_dim}, action dim {act_dim}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = read_u64(&mut r)?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let source = if flags[0] == 1 { Source::Demo } else { Source::Rollout };
        let success = flags[1] == 1;
        let t = read_u32(&mut r)? as usize;
        let mut observations = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            let mut data = vec![0.0; obs_dim];
            for v in &mut data {
                *v = read_f64(&mut r)?;
            }
            observations.push(Observation { data });
        }
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            let mut components = vec![0.0; act_dim];
            for v in &mut components {
                *v = read_f64(&mut r)?;
            }
            actions.push(Action { components });
        }
        let mut rewards = vec![0u32; t];
        for v in &mut rewards {
            *v = read_u32(&mut r)?;
        }
        let mut labels = vec![0u32; t];
        for v in &mut labels {
            *v = read_u32(&mut r)?;
        }
        out.push(Trajectory::with_labels(observations, actions, rewards, labels, seed, source, success)?);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
