//! Monte-Carlo counterparts of the exact expectations: branch rollouts in the
//! estimated dynamics and the score-function dynamics-gradient estimator with
//! baseline `b(s, a) = Q(s, a) - R(s, a)`.
//!
//! Every trajectory draws from its own counter-based stream derived from
//! `(seed, trajectory index)`, so batches are order-independent and
//! reproducible under parallel generation.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimation::{GradientVector, ThetaParams};
use crate::gridworld::Trajectory;
use crate::mdp::SoftSolution;

/// Inverse-CDF draw from a probability row. Tolerates rows whose floating
/// sum falls a few ulps short of 1 by falling back to the last positive entry.
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, row: ArrayView1<f64>) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if r < acc {
                return i;
            }
        }
    }
    last_positive
}

fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Where a batch was branched from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchOrigin {
    /// Every first action came from the dataset.
    RealBranch,
    /// At least one first action was sampled from the learner policy.
    FakeBranch,
}

/// A branch point: either a dataset state-action pair or a dataset state
/// whose first action is drawn from the learner policy.
#[derive(Debug, Clone, Copy)]
pub enum BranchStart {
    WithAction(usize, usize),
    PolicySampled(usize),
}

/// Trajectories simulated under the learner's `(P̂, π̂)` from given branch
/// points.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub origin: BranchOrigin,
    /// Realized `(state, first action)` per trajectory.
    pub branch_points: Vec<(usize, usize)>,
}

impl RolloutBatch {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// Simulates one trajectory per branch start under the learner dynamics and
/// policy. The first action is the supplied dataset action (real branch) or a
/// policy draw (fake branch); every trajectory runs exactly `steps`
/// transitions, with discounting left to the consumer.
pub fn branch_rollouts(
    theta: &ThetaParams,
    sol: &SoftSolution,
    starts: &[BranchStart],
    steps: usize,
    seed: u64,
) -> RolloutBatch {
    let p_hat = theta.transition();
    let mut trajectories = Vec::with_capacity(starts.len());
    let mut branch_points = Vec::with_capacity(starts.len());
    let mut any_sampled = false;
    for (i, start) in starts.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let (s0, a0) = match *start {
            BranchStart::WithAction(s, a) => (s, a),
            BranchStart::PolicySampled(s) => {
                any_sampled = true;
                (s, sample_categorical(&mut rng, sol.policy.row(s)))
            }
        };
        let mut states = Vec::with_capacity(steps + 1);
        let mut actions = Vec::with_capacity(steps);
        states.push(s0);
        let mut s = s0;
        let mut a = a0;
        for t in 0..steps {
            if t > 0 {
                a = sample_categorical(&mut rng, sol.policy.row(s));
            }
            let sp = sample_categorical(&mut rng, p_hat.slice(ndarray::s![s, a, ..]));
            actions.push(a);
            states.push(sp);
            s = sp;
        }
        branch_points.push((s0, a0));
        trajectories.push(Trajectory { states, actions });
    }
    let origin = if any_sampled { BranchOrigin::FakeBranch } else { BranchOrigin::RealBranch };
    RolloutBatch { trajectories, origin, branch_points }
}

/// Plain policy rollouts from an initial state distribution; used for
/// imagined-rollout evaluation.
pub fn policy_rollouts(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    init_dist: &Array1<f64>,
    n_rollouts: usize,
    steps: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut out = Vec::with_capacity(n_rollouts);
    for i in 0..n_rollouts {
        let mut rng = stream_rng(seed, i as u64);
        let mut s = sample_categorical(&mut rng, init_dist.view());
        let mut states = vec![s];
        let mut actions = Vec::with_capacity(steps);
        for _ in 0..steps {
            let a = sample_categorical(&mut rng, policy.row(s));
            let sp = sample_categorical(&mut rng, transition.slice(ndarray::s![s, a, ..]));
            actions.push(a);
            states.push(sp);
            s = sp;
        }
        out.push(Trajectory { states, actions });
    }
    out
}

/// Baseline used by the score-function estimator.
#[derive(Debug, Clone)]
pub enum Baseline {
    Zero,
    /// `b(s, a) = Q(s, a) - R(s, a)`, the default.
    QMinusR,
    /// Arbitrary state-action table, for baseline-invariance checks.
    Table(Array2<f64>),
}

/// Score-function estimator of the dynamics gradient of the discounted EV
/// terms along a batch: per sampled transition,
/// `γ^t (V(s') − b(s, a)) ∇ log P̂(s'|s, a)`, averaged over trajectories,
/// with the default baseline `b = Q − R`.
///
/// With `normalize` set, advantages are standardized across the mini-batch
/// (which biases the estimator; unbiasedness checks must run with it off).
pub fn reinforce_dynamics_grad(
    theta: &ThetaParams,
    sol: &SoftSolution,
    batch: &RolloutBatch,
    discount: f64,
    normalize: bool,
) -> Result<GradientVector> {
    reinforce_dynamics_grad_with(theta, sol, batch, discount, normalize, &Baseline::QMinusR)
}

/// As [`reinforce_dynamics_grad`] with an explicit baseline.
pub fn reinforce_dynamics_grad_with(
    theta: &ThetaParams,
    sol: &SoftSolution,
    batch: &RolloutBatch,
    discount: f64,
    normalize: bool,
    baseline: &Baseline,
) -> Result<GradientVector> {
    let n_transitions = batch.n_transitions();
    if normalize && n_transitions < 2 {
        return Err(Error::BatchTooSmall(n_transitions));
    }
    let p_hat = theta.transition();
    let reward = theta.reward_table();
    let b = |s: usize, a: usize| -> f64 {
        match baseline {
            Baseline::Zero => 0.0,
            Baseline::QMinusR => sol.q[[s, a]] - reward[[s, a]],
            Baseline::Table(t) => t[[s, a]],
        }
    };
    let mut advantages = Vec::with_capacity(n_transitions);
    for traj in &batch.trajectories {
        for t in 0..traj.len() {
            let (s, a, sp) = (traj.states[t], traj.actions[t], traj.states[t + 1]);
            advantages.push(sol.v[sp] - b(s, a));
        }
    }
    if normalize {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for x in &mut advantages {
            *x = (*x - mean) / (std + 1e-8);
        }
    }
    let mut grad = GradientVector::zeros_like(theta);
    let n_traj = batch.trajectories.len().max(1) as f64;
    let mut idx = 0;
    for traj in &batch.trajectories {
        let mut w = 1.0 / n_traj;
        for t in 0..traj.len() {
            let (s, a, sp) = (traj.states[t], traj.actions[t], traj.states[t + 1]);
            let scale = w * advantages[idx];
            idx += 1;
            for m in 0..theta.n_states() {
                let indicator = if m == sp { 1.0 } else { 0.0 };
                grad.d_dynamics[[s, a, m]] += scale * (indicator - p_hat[[s, a, m]]);
            }
            w *= discount;
        }
    }
    Ok(grad)
}
