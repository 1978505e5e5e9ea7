//! Stage labeling, per-stage discriminators, and online reward
//! densification.
//!
//! Each non-terminal stage k has a binary classifier δ_k over latent states,
//! trained to predict whether a state currently at stage k will progress
//! beyond it (label `s_t > k`, where `s_t` is the trajectory's suffix-max
//! stage). The sparse integer reward r is densified to `r + β·tanh(δ_r(z))`,
//! which confines every stage's rewards to a band of width 2β; terminal
//! states keep the exact value N. There is no δ_N: it would only ever see
//! negative labels, so the terminal reward is pinned instead.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::mlp::{Activation, Mlp, MlpSpec};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};

/// Largest admissible band half-width: stages are one apart, so β ≤ 1/3
/// leaves a margin of at least 1/3 between adjacent bands.
pub const BETA_MAX: f64 = 1.0 / 3.0;
pub const BETA_DEFAULT: f64 = 1.0 / 3.0;

pub fn validate_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= BETA_MAX + 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "beta must lie in (0, 1/3], got {beta}"
        )));
    }
    Ok(())
}

/// Suffix maximum of the reward sequence: `s_t = max_{t' >= t} r_{t'}`.
pub fn compute_max_stage_labels(rewards: &[u32]) -> Result<Vec<u32>> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("compute_max_stage_labels"));
    }
    let mut labels = vec![0; rewards.len()];
    let mut running = 0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        running = running.max(r);
        labels[i] = running;
    }
    Ok(labels)
}

/// One binary discriminator per non-terminal stage, each
/// `latent -> hidden (sigmoid) -> 1 logit` with a zero-initialized final
/// layer, so untrained logits are exactly zero and densification starts as
/// the identity on r.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    heads: Vec<Mlp>,
    latent_dim: usize,
}

impl DiscriminatorBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        latent_dim: usize,
        n_stages: u32,
        hidden: usize,
    ) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::InvalidConfig("discriminator bank needs at least one stage".into()));
        }
        let mut heads = Vec::with_capacity(n_stages as usize);
        for k in 0..n_stages {
            let spec = MlpSpec {
                name: format!("disc{k}"),
                group: ParamGroup::Discriminator,
                input: latent_dim,
                hidden: vec![hidden],
                output: 1,
                hidden_act: Activation::Sigmoid,
                output_act: Activation::None,
                zero_init_last: true,
            };
            heads.push(Mlp::new(store, &spec, rng)?);
        }
        Ok(DiscriminatorBank { heads, latent_dim })
    }

    /// Number of discriminators (= number of non-terminal stages).
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.param_ids()).collect()
    }

    /// Tape-recorded logits of δ_k on a (B, L) latent batch -> (B, 1).
    pub fn logit(&self, tape: &mut Tape, store: &ParamStore, k: usize, z: NodeId) -> NodeId {
        self.heads[k].forward(tape, store, z)
    }

    /// Gradient-free logits of δ_k -> (B, 1).
    pub fn logit_nograd(&self, store: &ParamStore, k: usize, z: &Matrix) -> Matrix {
        self.heads[k].forward_nograd(store, z)
    }
}

/// Per-stage diagnostics from one discriminator-loss evaluation.
#[derive(Debug, Clone)]
pub struct DiscBreakdown {
    /// Mean BCE per stage; `None` when the batch had no samples at that stage.
    pub per_stage_loss: Vec<Option<f64>>,
    pub per_stage_count: Vec<usize>,
    /// Samples where `logit > 0` agrees with the label `s > k`.
    pub per_stage_correct: Vec<usize>,
    /// Samples at the terminal stage, which have no discriminator.
    pub terminal_skipped: usize,
}

impl DiscBreakdown {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        if self.per_stage_count[k] == 0 {
            None
        } else {
            Some(self.per_stage_correct[k] as f64 / self.per_stage_count[k] as f64)
        }
    }

    /// Average loss over stages present in the batch.
    pub fn mean_loss(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_stage_loss.iter().flatten().copied().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// BCE loss over the bank on a batch of (latent, reward, label) samples.
///
/// Row i of `z` must carry stage reward `rewards[i]` and suffix-max label
/// `labels[i]`. Each sample at stage k < N contributes
/// `BCE(1[s > k], sigmoid(δ_k(z)))` to stage k's term; the returned loss
/// averages the per-stage means over stages that had samples, so absent
/// stages receive exactly zero gradient. Terminal samples (r = N) are
/// skipped. Returns `None` if every sample was terminal.
///
/// `z` should be a live (non-detached) encoder output: this loss is also an
/// encoder-shaping signal.
pub fn discriminator_loss(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &DiscriminatorBank,
    z: NodeId,
    rewards: &[u32],
    labels: &[u32],
) -> Result<(Option<NodeId>, DiscBreakdown)> {
    let rows = tape.value(z).rows;
    if rows != rewards.len() || rows != labels.len() {
        return Err(Error::DimMismatch {
            context: "discriminator_loss: rows vs rewards/labels".into(),
            expected: rows,
            got: rewards.len().min(labels.len()),
        });
    }
    let n = bank.len();
    let terminal = n as u32;
    for (i, (&r, &s)) in rewards.iter().zip(labels).enumerate() {
        if r > terminal || s > terminal || s < r {
            return Err(Error::InvalidLabels(format!(
                "sample {i}: reward {r}, label {s} (stage count {terminal})"
            )));
        }
    }

    let mut breakdown = DiscBreakdown {
        per_stage_loss: vec![None; n],
        per_stage_count: vec![0; n],
        per_stage_correct: vec![0; n],
        terminal_skipped: rewards.iter().filter(|&&r| r == terminal).count(),
    };

    let mut stage_terms: Vec<NodeId> = Vec::new();
    for k in 0..n {
        let count = rewards.iter().filter(|&&r| r as usize == k).count();
        breakdown.per_stage_count[k] = count;
        if count == 0 {
            continue;
        }
        // Run δ_k on the whole batch and mask out the other rows; batches are
        // small and this keeps the tape free of row-gather ops.
        let logits = bank.logit(tape, store, k, z);
        let mut mask = Matrix::zeros(rows, 1);
        let mut targets = Matrix::zeros(rows, 1);
        for i in 0..rows {
            if rewards[i] as usize == k {
                mask.data[i] = 1.0;
                targets.data[i] = f64::from(labels[i] > k as u32);
                let predict_positive = tape.value(logits).data[i] > 0.0;
                if predict_positive == (labels[i] > k as u32) {
                    breakdown.per_stage_correct[k] += 1;
                }
            }
        }
        let bce = tape.bce_with_logits(logits, targets);
        let mask_node = tape.constant(mask);
        let masked = tape.mul(bce, mask_node);
        let sum = tape.sum_all(masked);
        let mean = tape.mul_const(sum, 1.0 / count as f64);
        breakdown.per_stage_loss[k] = Some(tape.scalar(mean));
        stage_terms.push(mean);
    }

    let loss = match stage_terms.len() {
        0 => None,
        m => {
            let mut total = stage_terms[0];
            for term in &stage_terms[1..] {
                total = tape.add(total, *term);
            }
            Some(tape.mul_const(total, 1.0 / m as f64))
        }
    };
    Ok((loss, breakdown))
}

/// Densify one reward given its discriminator logit.
pub fn densify(r: u32, logit: f64, n_stages: u32, beta: f64) -> f64 {
    if r >= n_stages {
        f64::from(n_stages)
    } else {
        f64::from(r) + beta * logit.tanh()
    }
}

/// Densify a batch: row i of `z` has reward `rewards[i]`. Gradient-free —
/// dense rewards are regression targets, recomputed from the current bank at
/// every use and never cached.
pub fn densify_batch(
    store: &ParamStore,
    bank: &DiscriminatorBank,
    z: &Matrix,
    rewards: &[u32],
    beta: f64,
) -> Result<Vec<f64>> {
    if z.rows != rewards.len() {
        return Err(Error::DimMismatch {
            context: "densify_batch: rows vs rewards".into(),
            expected: z.rows,
            got: rewards.len(),
        });
    }
    let n = bank.len() as u32;
    // One forward per stage that actually occurs in the batch.
    let mut per_stage_logits: Vec<Option<Matrix>> = vec![None; bank.len()];
    for &r in rewards {
        if r > n {
            return Err(Error::InvalidLabels(format!("reward {r} exceeds stage count {n}")));
        }
        if r < n && per_stage_logits[r as usize].is_none() {
            per_stage_logits[r as usize] = Some(bank.logit_nograd(store, r as usize, z));
        }
    }
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if r >= n {
                f64::from(n)
            } else {
                let logit = per_stage_logits[r as usize].as_ref().unwrap().data[i];
                densify(r, logit, n, beta)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::{Adam, AdamConfig};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn suffix_max_by_hand() {
        assert_eq!(compute_max_stage_labels(&[0, 0, 1, 1, 1, 0]).unwrap(), vec![1, 1, 1, 1, 1, 0]);
        assert_eq!(compute_max_stage_labels(&[0, 0, 0]).unwrap(), vec![0, 0, 0]);
        assert_eq!(compute_max_stage_labels(&[2]).unwrap(), vec![2]);
        assert!(compute_max_stage_labels(&[]).is_err());
    }

    #[test]
    fn suffix_max_matches_brute_force_on_random_sequences() {
        let mut r = rng::stream(17, "labels");
        for _ in 0..200 {
            let len = r.gen_range(1..=200);
            let seq: Vec<u32> = (0..len).map(|_| r.gen_range(0..4)).collect();
            let fast = compute_max_stage_labels(&seq).unwrap();
            for t in 0..len {
                let brute = *seq[t..].iter().max().unwrap();
                assert_eq!(fast[t], brute);
            }
            // Labels are non-increasing and dominate rewards.
            for t in 0..len {
                assert!(fast[t] >= seq[t]);
                if t + 1 < len {
                    assert!(fast[t] >= fast[t + 1]);
                }
            }
        }
    }

    fn bank_fixture(latent: usize, stages: u32) -> (ParamStore, DiscriminatorBank) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, "disc-init");
        let bank = DiscriminatorBank::new(&mut store, &mut r, latent, stages, 8).unwrap();
        (store, bank)
    }

    #[test]
    fn fresh_bank_logits_are_zero_and_densification_is_identity() {
        let (store, bank) = bank_fixture(6, 3);
        let mut r = rng::stream(3, "latents");
        let z = Matrix::from_vec(10, 6, (0..60).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        for k in 0..bank.len() {
            assert!(bank.logit_nograd(&store, k, &z).data.iter().all(|&v| v == 0.0));
        }
        let rewards = vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let dense = densify_batch(&store, &bank, &z, &rewards, BETA_DEFAULT).unwrap();
        for (d, &r) in dense.iter().zip(&rewards) {
            assert_eq!(*d, f64::from(r));
        }
    }

    #[test]
    fn untrained_loss_is_ln_two_per_stage() {
        let (store, bank) = bank_fixture(4, 2);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(4, 4, vec![0.3; 16]).unwrap());
        let rewards = [0, 0, 1, 1];
        let labels = [1, 0, 2, 1];
        let (loss, bd) =
            discriminator_loss(&mut tape, &store, &bank, z, &rewards, &labels).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((tape.scalar(loss.unwrap()) - ln2).abs() < 1e-12);
        for k in 0..2 {
            assert!((bd.per_stage_loss[k].unwrap() - ln2).abs() < 1e-12);
            assert_eq!(bd.per_stage_count[k], 2);
        }
    }

    #[test]
    fn absent_stages_get_exactly_zero_gradient() {
        let (mut store, bank) = bank_fixture(4, 3);
        // Give stage 1's head nonzero weights so a gradient would be visible.
        let ids1 = bank.param_ids();
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(3, 4, vec![0.5, -0.2, 0.1, 0.9, 0.0, 0.4, -0.7, 0.3, 0.2, 0.2, 0.2, 0.2]).unwrap());
        let rewards = [0, 0, 2]; // no stage-1 samples; one stage-2 sample
        let labels = [2, 1, 3];
        let (loss, bd) =
            discriminator_loss(&mut tape, &store, &bank, z, &rewards, &labels).unwrap();
        tape.backward(loss.unwrap(), &mut store);
        assert_eq!(bd.per_stage_count[1], 0);
        assert!(bd.per_stage_loss[1].is_none());
        // Stage-1 head parameters: all-zero grads. Heads are named disc1.*.
        for id in ids1 {
            let t = store.get(id);
            if t.name.starts_with("disc1.") {
                assert!(t.grad.data.iter().all(|&g| g == 0.0), "{} got gradient", t.name);
            }
        }
        // Stage-0 head received gradient (two samples, differing labels).
        let got0 = store
            .iter()
            .filter(|(_, t)| t.name.starts_with("disc0."))
            .any(|(_, t)| t.grad.data.iter().any(|&g| g != 0.0));
        assert!(got0);
    }

    #[test]
    fn terminal_only_batches_produce_no_loss() {
        let (store, bank) = bank_fixture(4, 2);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(2, 4, vec![0.1; 8]).unwrap());
        let (loss, bd) = discriminator_loss(&mut tape, &store, &bank, z, &[2, 2], &[2, 2]).unwrap();
        assert!(loss.is_none());
        assert_eq!(bd.terminal_skipped, 2);
        assert!(bd.mean_loss().is_none());
    }

    #[test]
    fn invalid_reward_label_pairs_are_rejected() {
        let (store, bank) = bank_fixture(4, 2);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(1, 4, vec![0.0; 4]).unwrap());
        // label below reward violates the suffix-max property
        assert!(discriminator_loss(&mut tape, &store, &bank, z, &[1], &[0]).is_err());
        // reward beyond the stage count
        let z2 = tape.constant(Matrix::from_vec(1, 4, vec![0.0; 4]).unwrap());
        assert!(discriminator_loss(&mut tape, &store, &bank, z2, &[3], &[3]).is_err());
    }

    #[test]
    fn densify_matches_closed_forms() {
        assert_eq!(densify(1, 0.0, 3, BETA_DEFAULT), 1.0);
        let v = densify(2, -2.0, 3, BETA_DEFAULT);
        assert!((v - (2.0 - (2.0f64).tanh() / 3.0)).abs() < 1e-12);
        assert!((v - 1.67866).abs() < 1e-4);
        assert_eq!(densify(3, 123.0, 3, BETA_DEFAULT), 3.0);
        // Large logits approach but never reach the band edge.
        let hi = densify(0, 1e6, 3, BETA_DEFAULT);
        assert!(hi < BETA_DEFAULT + 1e-15 && hi > 0.3);
    }

    #[test]
    fn densified_rewards_stay_in_bands_and_preserve_order() {
        let mut r = rng::stream(8, "band");
        let beta = BETA_DEFAULT;
        let n = 3;
        // Logits up to ±12: far into tanh saturation, but still strictly
        // below 1 in f64 (tanh rounds to exactly 1.0 only beyond ~19).
        let mut samples: Vec<(u32, f64)> = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let stage = r.gen_range(0..n);
            let logit = r.gen_range(-12.0..12.0);
            samples.push((stage, densify(stage, logit, n, beta)));
        }
        for &(stage, d) in &samples {
            assert!(d > f64::from(stage) - beta && d < f64::from(stage) + beta);
        }
        // Strict cross-stage ordering over all pairs of distinct stages.
        let mut max_per_stage = [f64::NEG_INFINITY; 3];
        let mut min_per_stage = [f64::INFINITY; 3];
        for &(stage, d) in &samples {
            let s = stage as usize;
            max_per_stage[s] = max_per_stage[s].max(d);
            min_per_stage[s] = min_per_stage[s].min(d);
        }
        assert!(max_per_stage[0] < min_per_stage[1]);
        assert!(max_per_stage[1] < min_per_stage[2]);
    }

    #[test]
    fn beta_validation() {
        assert!(validate_beta(BETA_DEFAULT).is_ok());
        assert!(validate_beta(0.1).is_ok());
        assert!(validate_beta(0.0).is_err());
        assert!(validate_beta(0.34).is_err());
        assert!(validate_beta(-0.1).is_err());
    }

    #[test]
    fn encoder_receives_gradient_through_disc_loss() {
        // Chain a tiny encoder into the discriminators and check its grads.
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, "enc-init");
        let enc = Mlp::new(
            &mut store,
            &MlpSpec {
                name: "enc".into(),
                group: ParamGroup::Encoder,
                input: 5,
                hidden: vec![6],
                output: 4,
                hidden_act: Activation::Mish,
                output_act: Activation::GroupSoftmax(4),
                zero_init_last: false,
            },
            &mut r,
        )
        .unwrap();
        let bank = DiscriminatorBank::new(&mut store, &mut r, 4, 2, 8).unwrap();
        // Nudge discriminator weights off zero so gradients reach the encoder.
        for (id, t) in store.iter().map(|(i, t)| (i, t.name.clone())).collect::<Vec<_>>() {
            if t.starts_with("disc") {
                for v in &mut store.get_mut(id).value.data {
                    if *v == 0.0 {
                        *v = 0.05;
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let obs = tape.constant(Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64) / 10.0 - 1.0).collect()).unwrap());
        let z = enc.forward(&mut tape, &store, obs);
        let (loss, _) =
            discriminator_loss(&mut tape, &store, &bank, z, &[0, 0, 1, 1], &[1, 0, 2, 1]).unwrap();
        tape.backward(loss.unwrap(), &mut store);
        let enc_grad_norm: f64 = store
            .iter()
            .filter(|(_, t)| t.group == ParamGroup::Encoder)
            .flat_map(|(_, t)| t.grad.data.iter())
            .map(|g| g * g)
            .sum();
        assert!(enc_grad_norm > 0.0, "discriminator loss must shape the encoder");
    }

    #[test]
    fn discriminators_learn_separable_synthetic_latents() {
        // Frozen "encoder": latents are the raw 2-D points. Positive class
        // (label s > 0) lives at x > 0, negatives at x < 0.
        let mut store = ParamStore::new();
        let mut r = rng::stream(6, "sep");
        let bank = DiscriminatorBank::new(&mut store, &mut r, 2, 1, 8).unwrap();
        let mut opt = Adam::new(
            &store,
            AdamConfig::default(),
            &[(ParamGroup::Discriminator, 3e-3)],
        );
        let mut acc = 0.0;
        for _ in 0..200 {
            let mut zdata = Vec::with_capacity(64 * 2);
            let mut rewards = Vec::with_capacity(64);
            let mut labels = Vec::with_capacity(64);
            for _ in 0..64 {
                let positive = r.gen_bool(0.5);
                let x: f64 = if positive { r.gen_range(0.2..1.5) } else { r.gen_range(-1.5..-0.2) };
                zdata.push(x);
                zdata.push(r.gen_range(-1.0..1.0));
                rewards.push(0);
                labels.push(u32::from(positive));
            }
            let mut tape = Tape::new();
            let z = tape.constant(Matrix::from_vec(64, 2, zdata).unwrap());
            let (loss, bd) =
                discriminator_loss(&mut tape, &store, &bank, z, &rewards, &labels).unwrap();
            tape.backward(loss.unwrap(), &mut store);
            opt.step(&mut store, &[ParamGroup::Discriminator]).unwrap();
            store.zero_grads();
            acc = bd.accuracy(0).unwrap();
        }
        assert!(acc >= 0.95, "final training accuracy {acc} < 0.95");
    }
}
