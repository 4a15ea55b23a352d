//! Two-timescale training loops: BM-IRL coordinate ascent on the contrastive
//! surrogate, the robust RM-IRL variant with adversarially trained dynamics,
//! and the two-stage baseline that freezes a pretrained dynamics model.
//!
//! Every outer iteration re-solves the inner planning problem exactly (or
//! runs `partial_inner_sweeps` Bellman sweeps, warm-started), then takes one
//! reward ascent step and `dynamics_steps_per_outer` dynamics ascent steps.
//! The value function, learner policy, and branch occupancies stay frozen
//! within an iteration's updates; the dynamics probabilities are refreshed at
//! every inner dynamics step.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{self, Dataset, GridworldSpec};
use crate::mdp::{self, SoftSolution, TabularMdp};
use crate::sampling::{self, BranchStart, RolloutBatch};

use super::objectives::{
    self, data_dyn_loglik, ev_table, fake_root, log_posterior_parts, prior_gradient,
    reward_chain_rule, surrogate_objective_with, DataWeights, SolveOptions,
};
use super::theta::{RewardParam, ThetaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BmIrl,
    RmIrl,
    TwoStage,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::BmIrl => write!(f, "bm_irl"),
            Variant::RmIrl => write!(f, "rm_irl"),
            Variant::TwoStage => write!(f, "two_stage"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBackend {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    StateOnly,
    Table,
}

/// Imagined-rollout evaluation hooked into the training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridworldEvalConfig {
    pub spec: GridworldSpec,
    pub rollouts: usize,
    pub rollout_steps: usize,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the value-contrast term in the dynamics objective.
    pub lambda1: f64,
    /// Weight of the dynamics data-likelihood term.
    pub lambda2: f64,
    pub reward_lr: f64,
    pub dynamics_lr: f64,
    pub dynamics_steps_per_outer: usize,
    /// Mini-batch size of branch rollouts (sampled backend only).
    pub rollout_batch: usize,
    /// Branch rollout length (sampled backend only; the exact backend uses
    /// infinite-horizon occupancies).
    pub rollout_steps: usize,
    pub outer_iters: usize,
    pub seed: u64,
    pub variant: Variant,
    pub gradient_backend: GradientBackend,
    pub reward_mode: RewardMode,
    /// `Some(k)`: run k warm-started Bellman sweeps per outer step instead of
    /// solving the inner problem to tolerance.
    pub partial_inner_sweeps: Option<usize>,
    /// Standardize advantages inside the score-function estimator (sampled
    /// backend); biases the estimator but stabilizes training.
    pub normalize_advantages: bool,
    /// Laplace smoothing for the warm-start / two-stage dynamics MLE.
    pub laplace_smoothing: f64,
    pub record_every: usize,
    /// Parameter snapshot cadence; 0 keeps only the final parameters.
    pub snapshot_every: usize,
    pub solver: SolveOptions,
    pub eval: Option<GridworldEvalConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            reward_lr: 0.05,
            dynamics_lr: 0.05,
            dynamics_steps_per_outer: 1,
            rollout_batch: 256,
            rollout_steps: 40,
            outer_iters: 2000,
            seed: 0,
            variant: Variant::BmIrl,
            gradient_backend: GradientBackend::Exact,
            reward_mode: RewardMode::StateOnly,
            partial_inner_sweeps: None,
            normalize_advantages: true,
            laplace_smoothing: 1.0,
            record_every: 20,
            snapshot_every: 500,
            solver: SolveOptions::default(),
            eval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("reward_lr", self.reward_lr),
            ("dynamics_lr", self.dynamics_lr),
            ("laplace_smoothing", self.laplace_smoothing),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {x}"
                )));
            }
        }
        if self.variant == Variant::RmIrl && self.lambda2 <= self.lambda1 {
            return Err(Error::InvalidConfig(format!(
                "rm_irl requires lambda2 > lambda1 (got lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        if self.gradient_backend == GradientBackend::Sampled
            && (self.rollout_batch == 0 || self.rollout_steps == 0)
        {
            return Err(Error::InvalidConfig(
                "sampled backend needs rollout_batch >= 1 and rollout_steps >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Prior precision realized by the `(λ1, λ2)` weighting: the dynamics
    /// step direction `λ1·(value contrast) + λ2·(data log-likelihood)` is
    /// proportional to the posterior gradient at `λ = γ·λ2/λ1`, which is the
    /// λ used to monitor and report the log posterior. With `λ1 = 0` the
    /// dynamics update is pure likelihood ascent and `λ2` is reported.
    pub fn effective_lambda(&self, discount: f64) -> f64 {
        if self.lambda1 > 0.0 {
            discount * self.lambda2 / self.lambda1
        } else {
            self.lambda2
        }
    }
}

/// One recorded row of training metrics (at the parameters held at the start
/// of the iteration).
#[derive(Debug, Clone, Serialize)]
pub struct IterRow {
    pub iter: usize,
    pub log_posterior: f64,
    pub surrogate: f64,
    pub reward_grad_norm: f64,
    pub dyn_grad_norm: f64,
    pub data_dyn_loglik: f64,
    pub illegal_rate: Option<f64>,
    pub expert_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iter: usize,
    pub theta: ThetaParams,
}

/// Closed-form dynamics MLE summary (two-stage phase 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleSummary {
    pub smoothing: f64,
    pub visited_rows: usize,
    pub mean_tv_to_empirical: f64,
    pub max_tv_to_empirical: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub rows: Vec<IterRow>,
    pub snapshots: Vec<Snapshot>,
    pub final_theta: ThetaParams,
    pub final_solution: SoftSolution,
    pub phase1: Option<MleSummary>,
}

/// Logits of the row-wise Laplace-smoothed frequency estimate
/// `(N(s,a,·) + α) / (N(s,a) + α·n)`. Unvisited rows come out uniform.
pub fn mle_dynamics_logits(
    data: &Dataset,
    n_states: usize,
    n_actions: usize,
    smoothing: f64,
) -> Array3<f64> {
    let mut logits = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let visits = data.sa_counts[[s, a]];
            let denom = visits + smoothing * n_states as f64;
            for sp in 0..n_states {
                let p = if denom > 0.0 {
                    (data.counts[[s, a, sp]] + smoothing) / denom
                } else {
                    1.0 / n_states as f64
                };
                logits[[s, a, sp]] = p.ln();
            }
        }
    }
    logits
}

/// Per-row total-variation distances between the smoothed MLE and the raw
/// empirical frequencies, over visited rows.
pub fn mle_summary(data: &Dataset, smoothing: f64) -> MleSummary {
    let (n_states, n_actions) = data.sa_counts.dim();
    let mut visited_rows = 0usize;
    let mut sum_tv = 0.0f64;
    let mut max_tv = 0.0f64;
    for s in 0..n_states {
        for a in 0..n_actions {
            let visits = data.sa_counts[[s, a]];
            if visits > 0.0 {
                visited_rows += 1;
                let denom = visits + smoothing * n_states as f64;
                let mut tv = 0.0;
                for sp in 0..n_states {
                    let smoothed = (data.counts[[s, a, sp]] + smoothing) / denom;
                    let empirical = data.counts[[s, a, sp]] / visits;
                    tv += (smoothed - empirical).abs();
                }
                tv *= 0.5;
                sum_tv += tv;
                max_tv = max_tv.max(tv);
            }
        }
    }
    MleSummary {
        smoothing,
        visited_rows,
        mean_tv_to_empirical: if visited_rows > 0 { sum_tv / visited_rows as f64 } else { 0.0 },
        max_tv_to_empirical: max_tv,
    }
}

/// Aborts when the monitored value turns non-finite or decreases for
/// `limit` consecutive observations.
struct DivergenceMonitor {
    last: Option<f64>,
    streak: usize,
    limit: usize,
}

impl DivergenceMonitor {
    fn new(limit: usize) -> Self {
        DivergenceMonitor { last: None, streak: 0, limit }
    }

    fn observe(&mut self, iter: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Divergence {
                iter,
                diagnostic: format!("log posterior is not finite ({value})"),
            });
        }
        if let Some(prev) = self.last {
            if value < prev {
                self.streak += 1;
                if self.streak >= self.limit {
                    return Err(Error::Divergence {
                        iter,
                        diagnostic: format!(
                            "log posterior decreased for {} consecutive iterations (now {value:.6})",
                            self.limit
                        ),
                    });
                }
            } else {
                self.streak = 0;
            }
        }
        self.last = Some(value);
        Ok(())
    }
}

/// Mean discounted reward-gradient of a rollout batch:
/// `(1/B) Σ_τ Σ_t γ^t ∇R(s_t, a_t)`.
pub fn sampled_reward_gradient(
    theta: &ThetaParams,
    batch: &RolloutBatch,
    discount: f64,
) -> RewardParam {
    let (ns, na) = (theta.n_states(), theta.n_actions());
    let mut weight = Array2::<f64>::zeros((ns, na));
    let n_traj = batch.trajectories.len().max(1) as f64;
    for traj in &batch.trajectories {
        let mut w = 1.0 / n_traj;
        for t in 0..traj.len() {
            weight[[traj.states[t], traj.actions[t]]] += w;
            w *= discount;
        }
    }
    reward_chain_rule(theta, &weight)
}

fn draw_dataset_pairs(
    rng: &mut rand_chacha::ChaCha8Rng,
    weights: &DataWeights,
    n: usize,
) -> Vec<(usize, usize)> {
    let (ns, na) = weights.sa.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = (ns - 1, na - 1);
        'outer: for s in 0..ns {
            for a in 0..na {
                let p = weights.sa[[s, a]];
                if p > 0.0 {
                    acc += p;
                    pick = (s, a);
                    if r < acc {
                        break 'outer;
                    }
                }
            }
        }
        out.push(pick);
    }
    out
}

/// Real-branch occupancy of the robust reward contrast: every dataset index
/// roots a discounted forward walk along its own recorded trajectory (the
/// real branches are drawn from the dataset, never re-simulated). Averaging
/// the walks over all NT roots collapses to one closed-form weight per
/// recorded transition: index u of a trajectory carries
/// `Σ_{k≤u} γ^k = (1 − γ^{u+1})/(1 − γ)`, normalized by NT. The result is
/// commensurate with a fake-branch occupancy rooted at the dataset state
/// marginal.
fn dataset_forward_occupancy(
    data: &Dataset,
    n_states: usize,
    n_actions: usize,
    discount: f64,
) -> Array2<f64> {
    let mut table = Array2::<f64>::zeros((n_states, n_actions));
    let total = data.n_transitions();
    if total == 0.0 {
        return table;
    }
    for traj in &data.trajectories {
        let mut partial = 1.0; // Σ_{k≤u} γ^k
        for u in 0..traj.len() {
            table[[traj.states[u], traj.actions[u]]] += partial / total;
            partial = 1.0 + discount * partial;
        }
    }
    table
}

/// Discounted occupancy estimate from truncated rollouts: transition t
/// carries weight `γ^t`, averaged over trajectories.
fn discounted_visit_estimate(
    batch: &[gridworld::Trajectory],
    n_states: usize,
    n_actions: usize,
    discount: f64,
) -> Array2<f64> {
    let mut table = Array2::<f64>::zeros((n_states, n_actions));
    let n_traj = batch.len().max(1) as f64;
    for traj in batch {
        let mut w = 1.0 / n_traj;
        for t in 0..traj.len() {
            table[[traj.states[t], traj.actions[t]]] += w;
            w *= discount;
        }
    }
    table
}

/// Dispatches on `cfg.variant`.
pub fn train(mdp_true: &TabularMdp, data: &Dataset, cfg: &TrainConfig) -> Result<TrainingRecord> {
    cfg.validate()?;
    run_training(mdp_true, data, cfg)
}

/// Bayesian model-based IRL: coordinate ascent alternating one reward step on
/// the real/fake energy contrast with `dynamics_steps_per_outer` steps on the
/// λ1-weighted value contrast plus λ2-weighted data likelihood.
pub fn bm_irl_train(
    mdp_true: &TabularMdp,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingRecord> {
    expect_variant(cfg, Variant::BmIrl)?;
    train(mdp_true, data, cfg)
}

/// Robust variant: the reward contrast compares the dataset occupancy against
/// the learner's occupancy in its own dynamics, and the dynamics update drops
/// the real branch, minimizing fake-branch value (worst-case dynamics) while
/// maximizing data likelihood. Requires `lambda2 > lambda1`.
pub fn rm_irl_train(
    mdp_true: &TabularMdp,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingRecord> {
    expect_variant(cfg, Variant::RmIrl)?;
    train(mdp_true, data, cfg)
}

/// Two-stage baseline: dynamics fixed at the smoothed MLE after phase 1,
/// reward trained with the same update rule as BM-IRL.
pub fn two_stage_train(
    mdp_true: &TabularMdp,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingRecord> {
    expect_variant(cfg, Variant::TwoStage)?;
    train(mdp_true, data, cfg)
}

fn expect_variant(cfg: &TrainConfig, want: Variant) -> Result<()> {
    if cfg.variant != want {
        return Err(Error::InvalidConfig(format!(
            "config variant is {}, expected {}",
            cfg.variant, want
        )));
    }
    Ok(())
}

struct IterDirections {
    reward: RewardParam,
    first_dynamics_norm: f64,
}

fn run_training(mdp_true: &TabularMdp, data: &Dataset, cfg: &TrainConfig) -> Result<TrainingRecord> {
    let (ns, na) = (mdp_true.n_states, mdp_true.n_actions);
    let gamma = mdp_true.discount;
    let weights = DataWeights::from_dataset(data)?;
    let expert = mdp::soft_value_iteration(mdp_true, cfg.solver.tol, cfg.solver.max_iter)?;
    let expert_j = mdp::discounted_return(mdp_true, &expert.policy)?;

    let reward = match cfg.reward_mode {
        RewardMode::StateOnly => RewardParam::StateLogits(Array1::zeros(ns)),
        RewardMode::Table => RewardParam::Table(Array2::zeros((ns, na))),
    };
    let dynamics_logits = mle_dynamics_logits(data, ns, na, cfg.laplace_smoothing);
    let mut theta =
        ThetaParams::new(reward, dynamics_logits, cfg.effective_lambda(gamma))?;
    let phase1 = match cfg.variant {
        Variant::TwoStage => Some(mle_summary(data, cfg.laplace_smoothing)),
        _ => None,
    };

    let rm_real_occ = dataset_forward_occupancy(data, ns, na, gamma);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut monitor = DivergenceMonitor::new(50);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut v_warm = Array1::zeros(ns);

    for iter in 0..cfg.outer_iters {
        let sol = inner_solve(&theta, gamma, &mdp_true.init_dist, cfg, &v_warm)?;
        v_warm.assign(&sol.v);
        let p_hat = theta.transition();

        let post = log_posterior_parts(&sol, &p_hat, &weights, theta.lambda);
        monitor.observe(iter, post.value)?;

        let record_now = iter % cfg.record_every == 0;
        if cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0 {
            snapshots.push(Snapshot { iter, theta: theta.clone() });
        }

        let directions = match cfg.gradient_backend {
            GradientBackend::Exact => {
                exact_updates(&mut theta, mdp_true, &sol, &p_hat, &weights, &rm_real_occ, cfg)?
            }
            GradientBackend::Sampled => {
                sampled_updates(&mut theta, mdp_true, &sol, &weights, &rm_real_occ, cfg, &mut rng)?
            }
        };
        if !theta.is_finite() {
            return Err(Error::Divergence {
                iter,
                diagnostic: "parameters became non-finite after the update".into(),
            });
        }

        if record_now {
            rows.push(record_row(
                iter, &theta, mdp_true, &sol, &p_hat, &weights, cfg, &post, &directions, expert_j,
            )?);
        }
    }

    // Terminal row at the final parameters with fresh metrics.
    let sol = inner_solve(&theta, gamma, &mdp_true.init_dist, cfg, &v_warm)?;
    let p_hat = theta.transition();
    let post = log_posterior_parts(&sol, &p_hat, &weights, theta.lambda);
    monitor.observe(cfg.outer_iters, post.value)?;
    let directions =
        stationary_directions(&theta, mdp_true, &sol, &p_hat, &weights, &rm_real_occ, cfg)?;
    rows.push(record_row(
        cfg.outer_iters, &theta, mdp_true, &sol, &p_hat, &weights, cfg, &post, &directions,
        expert_j,
    )?);

    Ok(TrainingRecord { rows, snapshots, final_theta: theta, final_solution: sol, phase1 })
}

fn inner_solve(
    theta: &ThetaParams,
    gamma: f64,
    init_dist: &Array1<f64>,
    cfg: &TrainConfig,
    v_warm: &Array1<f64>,
) -> Result<SoftSolution> {
    let mdp_hat = theta.induced_mdp(gamma, init_dist.clone())?;
    match cfg.partial_inner_sweeps {
        None => mdp::soft_value_iteration_from(&mdp_hat, v_warm, cfg.solver.tol, cfg.solver.max_iter),
        Some(k) => Ok(mdp::soft_sweeps(&mdp_hat, v_warm, k.max(1))),
    }
}

/// Exact-expectation reward and dynamics steps. Returns the step directions
/// for the record.
fn exact_updates(
    theta: &mut ThetaParams,
    mdp_true: &TabularMdp,
    sol: &SoftSolution,
    p_hat: &Array3<f64>,
    weights: &DataWeights,
    rm_real_occ: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<IterDirections> {
    let gamma = mdp_true.discount;
    let w_real = mdp::discounted_flow(p_hat, &sol.policy, gamma, &weights.sa, mdp::FLOW_TOL)?;
    let w_fake = mdp::discounted_flow(
        p_hat,
        &sol.policy,
        gamma,
        &fake_root(weights, &sol.policy),
        mdp::FLOW_TOL,
    )?;
    let contrast = &w_real - &w_fake;

    let g_reward = match cfg.variant {
        Variant::BmIrl | Variant::TwoStage => reward_chain_rule(theta, &contrast),
        Variant::RmIrl => reward_chain_rule(theta, &(rm_real_occ - &w_fake)),
    };
    theta.reward.scaled_add(cfg.reward_lr, &g_reward);

    let mut first_dynamics_norm = 0.0;
    if cfg.variant != Variant::TwoStage {
        for step in 0..cfg.dynamics_steps_per_outer {
            let p_cur = theta.transition();
            let g = exact_dynamics_direction(cfg, sol, &p_cur, weights, &w_fake, &contrast);
            if step == 0 {
                first_dynamics_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            theta.dynamics_logits.zip_mut_with(&g, |x, y| *x += cfg.dynamics_lr * y);
        }
    }
    Ok(IterDirections {
        reward: g_reward,
        first_dynamics_norm,
    })
}

/// Dynamics ascent direction `λ1·(value contrast) + λ2·(data likelihood)`
/// (BM-IRL) or `−λ1·(fake-branch value) + λ2·(data likelihood)` (RM-IRL),
/// with the value weights V and branch occupancies frozen at the iteration's
/// inner solution and P̂ taken at the current logits.
fn exact_dynamics_direction(
    cfg: &TrainConfig,
    sol: &SoftSolution,
    p_cur: &Array3<f64>,
    weights: &DataWeights,
    w_fake: &Array2<f64>,
    contrast: &Array2<f64>,
) -> Array3<f64> {
    let (ns, na, _) = p_cur.dim();
    let ev = ev_table(p_cur, &sol.v);
    let mut g = Array3::<f64>::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            let w = match cfg.variant {
                Variant::BmIrl => cfg.lambda1 * contrast[[s, a]],
                Variant::RmIrl => -cfg.lambda1 * w_fake[[s, a]],
                Variant::TwoStage => 0.0,
            };
            if w != 0.0 {
                for m in 0..ns {
                    g[[s, a, m]] = w * p_cur[[s, a, m]] * (sol.v[m] - ev[[s, a]]);
                }
            }
        }
    }
    if cfg.lambda2 != 0.0 {
        let prior = prior_gradient(weights, p_cur);
        g.zip_mut_with(&prior, |x, y| *x += cfg.lambda2 * y);
    }
    g
}

fn sampled_updates(
    theta: &mut ThetaParams,
    mdp_true: &TabularMdp,
    sol: &SoftSolution,
    weights: &DataWeights,
    rm_real_occ: &Array2<f64>,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<IterDirections> {
    let gamma = mdp_true.discount;
    let pairs = draw_dataset_pairs(rng, weights, cfg.rollout_batch);
    let real_starts: Vec<BranchStart> =
        pairs.iter().map(|&(s, a)| BranchStart::WithAction(s, a)).collect();
    let fake_starts: Vec<BranchStart> =
        pairs.iter().map(|&(s, _)| BranchStart::PolicySampled(s)).collect();
    let real_seed: u64 = rng.gen();
    let fake_seed: u64 = rng.gen();
    let real = sampling::branch_rollouts(theta, sol, &real_starts, cfg.rollout_steps, real_seed);
    let fake = sampling::branch_rollouts(theta, sol, &fake_starts, cfg.rollout_steps, fake_seed);

    let g_reward = match cfg.variant {
        Variant::BmIrl | Variant::TwoStage => {
            let mut g = sampled_reward_gradient(theta, &real, gamma);
            g.scaled_add(-1.0, &sampled_reward_gradient(theta, &fake, gamma));
            g
        }
        Variant::RmIrl => {
            // Real side from the recorded data (exact, never re-simulated);
            // fake side estimated from the dataset-rooted policy rollouts.
            let rho_hat = discounted_visit_estimate(
                &fake.trajectories,
                theta.n_states(),
                theta.n_actions(),
                gamma,
            );
            reward_chain_rule(theta, &(rm_real_occ - &rho_hat))
        }
    };
    theta.reward.scaled_add(cfg.reward_lr, &g_reward);

    let mut first_dynamics_norm = 0.0;
    if cfg.variant != Variant::TwoStage {
        for step in 0..cfg.dynamics_steps_per_outer {
            let mut g = Array3::<f64>::zeros(theta.dynamics_logits.dim());
            match cfg.variant {
                Variant::BmIrl => {
                    let gr = sampling::reinforce_dynamics_grad(
                        theta, sol, &real, gamma, cfg.normalize_advantages,
                    )?;
                    let gf = sampling::reinforce_dynamics_grad(
                        theta, sol, &fake, gamma, cfg.normalize_advantages,
                    )?;
                    g.zip_mut_with(&gr.d_dynamics, |x, y| *x += cfg.lambda1 * y);
                    g.zip_mut_with(&gf.d_dynamics, |x, y| *x -= cfg.lambda1 * y);
                }
                Variant::RmIrl => {
                    let gf = sampling::reinforce_dynamics_grad(
                        theta, sol, &fake, gamma, cfg.normalize_advantages,
                    )?;
                    g.zip_mut_with(&gf.d_dynamics, |x, y| *x -= cfg.lambda1 * y);
                }
                Variant::TwoStage => unreachable!(),
            }
            if cfg.lambda2 != 0.0 {
                let prior = prior_gradient(weights, &theta.transition());
                g.zip_mut_with(&prior, |x, y| *x += cfg.lambda2 * y);
            }
            if step == 0 {
                first_dynamics_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            theta.dynamics_logits.zip_mut_with(&g, |x, y| *x += cfg.dynamics_lr * y);
        }
    }
    Ok(IterDirections { reward: g_reward, first_dynamics_norm })
}

/// Step directions evaluated (but not applied) at the final parameters.
fn stationary_directions(
    theta: &ThetaParams,
    mdp_true: &TabularMdp,
    sol: &SoftSolution,
    p_hat: &Array3<f64>,
    weights: &DataWeights,
    rm_real_occ: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<IterDirections> {
    let gamma = mdp_true.discount;
    let w_real = mdp::discounted_flow(p_hat, &sol.policy, gamma, &weights.sa, mdp::FLOW_TOL)?;
    let w_fake = mdp::discounted_flow(
        p_hat,
        &sol.policy,
        gamma,
        &fake_root(weights, &sol.policy),
        mdp::FLOW_TOL,
    )?;
    let contrast = &w_real - &w_fake;
    let reward = match cfg.variant {
        Variant::BmIrl | Variant::TwoStage => reward_chain_rule(theta, &contrast),
        Variant::RmIrl => reward_chain_rule(theta, &(rm_real_occ - &w_fake)),
    };
    let g = exact_dynamics_direction(cfg, sol, p_hat, weights, &w_fake, &contrast);
    let first_dynamics_norm = if cfg.variant == Variant::TwoStage {
        0.0
    } else {
        g.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    Ok(IterDirections { reward, first_dynamics_norm })
}

#[allow(clippy::too_many_arguments)]
fn record_row(
    iter: usize,
    theta: &ThetaParams,
    mdp_true: &TabularMdp,
    sol: &SoftSolution,
    p_hat: &Array3<f64>,
    weights: &DataWeights,
    cfg: &TrainConfig,
    post: &objectives::PosteriorEval,
    directions: &IterDirections,
    expert_j: f64,
) -> Result<IterRow> {
    let surrogate = surrogate_objective_with(theta, sol, weights, mdp_true.discount)?;
    let learner_j = mdp::discounted_return(mdp_true, &sol.policy)?;
    let illegal_rate = match &cfg.eval {
        Some(eval) => {
            let seed = cfg.seed ^ 0xE7A1_u64 ^ (iter as u64).wrapping_mul(0x9E37_79B9);
            let rollouts = sampling::policy_rollouts(
                p_hat,
                &sol.policy,
                &mdp_true.init_dist,
                eval.rollouts,
                eval.rollout_steps,
                seed,
            );
            Some(gridworld::illegal_transition_rate(&eval.spec, &rollouts)?)
        }
        None => None,
    };
    let (dyn_loglik, _) = data_dyn_loglik(weights, p_hat);
    Ok(IterRow {
        iter,
        log_posterior: post.value,
        surrogate,
        reward_grad_norm: directions.reward.norm_sq().sqrt(),
        dyn_grad_norm: directions.first_dynamics_norm,
        data_dyn_loglik: dyn_loglik,
        illegal_rate,
        expert_gap: (expert_j - learner_j).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_gridworld, generate_expert_dataset, GridworldSpec};

    fn small_setup() -> (TabularMdp, Dataset) {
        let spec = GridworldSpec { width: 2, height: 2, goal: (1, 1), ..Default::default() };
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let data = generate_expert_dataset(&mdp, 30, 20, 11).unwrap();
        (mdp, data)
    }

    #[test]
    fn zero_scales_leave_parameters_unchanged() {
        let (mdp, data) = small_setup();
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            reward_lr: 0.0,
            dynamics_lr: 0.0,
            outer_iters: 7,
            record_every: 3,
            ..Default::default()
        };
        let record = bm_irl_train(&mdp, &data, &cfg).unwrap();
        let expected = mle_dynamics_logits(&data, mdp.n_states, mdp.n_actions, 1.0);
        assert_eq!(record.final_theta.dynamics_logits, expected);
        match &record.final_theta.reward {
            RewardParam::StateLogits(x) => assert!(x.iter().all(|v| *v == 0.0)),
            _ => panic!("expected state logits"),
        }
    }

    #[test]
    fn deterministic_rerun_is_bit_identical() {
        let (mdp, data) = small_setup();
        for backend in [GradientBackend::Exact, GradientBackend::Sampled] {
            let cfg = TrainConfig {
                outer_iters: 12,
                record_every: 4,
                rollout_batch: 16,
                rollout_steps: 8,
                gradient_backend: backend,
                seed: 5,
                ..Default::default()
            };
            let a = train(&mdp, &data, &cfg).unwrap();
            let b = train(&mdp, &data, &cfg).unwrap();
            assert_eq!(a.final_theta, b.final_theta);
            assert_eq!(a.rows.len(), b.rows.len());
            for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
                assert_eq!(ra.log_posterior.to_bits(), rb.log_posterior.to_bits());
                assert_eq!(ra.surrogate.to_bits(), rb.surrogate.to_bits());
            }
        }
    }

    #[test]
    fn two_stage_keeps_dynamics_frozen_and_reports_phase1() {
        let (mdp, data) = small_setup();
        let cfg = TrainConfig {
            variant: Variant::TwoStage,
            outer_iters: 25,
            ..Default::default()
        };
        let record = two_stage_train(&mdp, &data, &cfg).unwrap();
        let expected = mle_dynamics_logits(&data, mdp.n_states, mdp.n_actions, 1.0);
        assert_eq!(record.final_theta.dynamics_logits, expected);
        let summary = record.phase1.expect("two-stage records an MLE summary");
        assert!(summary.visited_rows > 0);
        assert!(summary.max_tv_to_empirical <= 1.0);
    }

    #[test]
    fn rm_irl_rejects_non_dominant_lambda2() {
        let (mdp, data) = small_setup();
        let cfg = TrainConfig {
            variant: Variant::RmIrl,
            lambda1: 1.0,
            lambda2: 0.5,
            ..Default::default()
        };
        assert!(matches!(rm_irl_train(&mdp, &data, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn variant_mismatch_rejected() {
        let (mdp, data) = small_setup();
        let cfg = TrainConfig { variant: Variant::BmIrl, ..Default::default() };
        assert!(rm_irl_train(&mdp, &data, &cfg).is_err());
        assert!(two_stage_train(&mdp, &data, &cfg).is_err());
    }

    #[test]
    fn divergence_monitor_trips_on_streaks_and_nan() {
        let mut m = DivergenceMonitor::new(3);
        m.observe(0, 1.0).unwrap();
        m.observe(1, 0.9).unwrap();
        m.observe(2, 0.8).unwrap();
        assert!(matches!(m.observe(3, 0.7), Err(Error::Divergence { .. })));

        let mut m = DivergenceMonitor::new(3);
        m.observe(0, 1.0).unwrap();
        m.observe(1, 0.9).unwrap();
        m.observe(2, 1.1).unwrap(); // reset
        m.observe(3, 1.0).unwrap();
        m.observe(4, 0.9).unwrap();
        assert!(m.observe(5, 0.8).is_err());

        let mut m = DivergenceMonitor::new(3);
        assert!(matches!(m.observe(0, f64::NAN), Err(Error::Divergence { .. })));
    }

    #[test]
    fn huge_learning_rate_aborts_with_divergence() {
        let (mdp, data) = small_setup();
        let cfg = TrainConfig {
            dynamics_lr: 1e308,
            reward_lr: 1e308,
            outer_iters: 200,
            ..Default::default()
        };
        let err = bm_irl_train(&mdp, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "got {err:?}");
    }

    #[test]
    fn exact_and_sampled_one_step_updates_agree() {
        // One outer step from the same θ with normalization off: the sampled
        // update must land within 3 standard errors of the exact one.
        let (mdp, data) = small_setup();
        let base = TrainConfig {
            outer_iters: 1,
            dynamics_steps_per_outer: 1,
            normalize_advantages: false,
            reward_lr: 1.0,
            dynamics_lr: 1.0,
            rollout_steps: 40,
            ..Default::default()
        };
        let exact_cfg = TrainConfig { gradient_backend: GradientBackend::Exact, ..base.clone() };
        let exact_run = train(&mdp, &data, &exact_cfg).unwrap();

        // Repeat the sampled one-step update over many disjoint seeds and
        // average; the per-seed spread gives the standard error.
        let n_rep = 200usize;
        let batch = 500usize; // 1e5 rollouts in total
        let mut mean_dyn = Array3::<f64>::zeros(mdp.transition.dim());
        let mut m2_dyn = Array3::<f64>::zeros(mdp.transition.dim());
        let mut mean_rew = Array1::<f64>::zeros(mdp.n_states);
        let mut m2_rew = Array1::<f64>::zeros(mdp.n_states);
        for rep in 0..n_rep {
            let cfg = TrainConfig {
                gradient_backend: GradientBackend::Sampled,
                rollout_batch: batch,
                seed: 1000 + rep as u64,
                ..base.clone()
            };
            let run = train(&mdp, &data, &cfg).unwrap();
            let n = (rep + 1) as f64;
            for (k, x) in run.final_theta.dynamics_logits.iter().enumerate() {
                let m = mean_dyn.as_slice_mut().unwrap();
                let q = m2_dyn.as_slice_mut().unwrap();
                let delta = x - m[k];
                m[k] += delta / n;
                q[k] += delta * (x - m[k]);
            }
            if let RewardParam::StateLogits(r) = &run.final_theta.reward {
                for (k, x) in r.iter().enumerate() {
                    let delta = x - mean_rew[k];
                    mean_rew[k] += delta / n;
                    m2_rew[k] += delta * (x - mean_rew[k]);
                }
            }
        }
        let n = n_rep as f64;
        for (k, e) in exact_run.final_theta.dynamics_logits.iter().enumerate() {
            let m = mean_dyn.as_slice().unwrap()[k];
            let se = (m2_dyn.as_slice().unwrap()[k] / (n - 1.0) / n).sqrt();
            assert!(
                (m - e).abs() <= 3.0 * se + 1e-6,
                "dynamics coord {k}: sampled mean {m} vs exact {e} (se {se})"
            );
        }
        if let RewardParam::StateLogits(er) = &exact_run.final_theta.reward {
            for k in 0..er.len() {
                let se = (m2_rew[k] / (n - 1.0) / n).sqrt();
                assert!(
                    (mean_rew[k] - er[k]).abs() <= 3.0 * se + 1e-6,
                    "reward coord {k}: sampled mean {} vs exact {} (se {se})",
                    mean_rew[k],
                    er[k]
                );
            }
        }
    }

    #[test]
    fn rm_irl_with_zero_lambda1_recovers_empirical_frequencies() {
        // Pure-MLE dynamics ascent: visited rows converge to the empirical
        // transition frequencies (the unique maximizer over softmax rows).
        let mdp = TabularMdp::random(3, 2, 0.8, 51);
        let data = generate_dataset_with_uniform_policy(&mdp, 400, 25, 3);
        let cfg = TrainConfig {
            variant: Variant::RmIrl,
            lambda1: 0.0,
            lambda2: 1.0,
            reward_lr: 0.0,
            dynamics_lr: 4.0,
            outer_iters: 4000,
            record_every: 1000,
            snapshot_every: 0,
            ..Default::default()
        };
        let record = rm_irl_train(&mdp, &data, &cfg).unwrap();
        let p_hat = record.final_theta.transition();
        for s in 0..3 {
            for a in 0..2 {
                let visits = data.sa_counts[[s, a]];
                if visits > 0.0 {
                    let mut tv = 0.0;
                    for sp in 0..3 {
                        let emp = data.counts[[s, a, sp]] / visits;
                        tv += (p_hat[[s, a, sp]] - emp).abs();
                    }
                    tv *= 0.5;
                    assert!(tv <= 1e-3, "row ({s},{a}) TV {tv}");
                }
            }
        }
    }

    fn generate_dataset_with_uniform_policy(
        mdp: &TabularMdp,
        n_traj: usize,
        horizon: usize,
        seed: u64,
    ) -> Dataset {
        // Uniform behavior policy covers all (s, a) quickly.
        let uniform = Array2::from_elem((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions as f64);
        let trajs = sampling::policy_rollouts(
            &mdp.transition,
            &uniform,
            &mdp.init_dist,
            n_traj,
            horizon,
            seed,
        );
        Dataset::from_trajectories(trajs, mdp.n_states, mdp.n_actions).unwrap()
    }
}
