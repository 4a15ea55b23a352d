//! Posterior and surrogate objectives with exact gradients through the
//! planner.
//!
//! The normalized log posterior is
//!
//! ```text
//! L(θ) = E_D[ log π̂(a|s; θ) + λ log P̂(s'|s, a) ]
//! ```
//!
//! subject to π̂ being soft-optimal in (R_θ, P̂_θ). Its policy gradient is
//!
//! ```text
//! ∇ log π̂(a|s) = ∇Q(s, a) − E_{ã∼π̂(·|s)}[∇Q(s, ã)]
//! ∇_reward  Q(s, a) = E_{ρ̂(s̃,ã|s,a)}[ ∇R(s̃, ã) ]
//! ∇_dynamics Q(s, a) = E_{ρ̂(s̃,ã|s,a)}[ γ Σ_{s'} V(s') ∇P̂(s'|s̃, ã) ]
//! ```
//!
//! where ρ̂(·|s, a) is the learner's conditional occupancy. Since conditional
//! occupancies are linear in their root, every aggregate gradient reduces to
//! one discounted-flow solve with a (possibly signed) root table, followed by
//! the same per-pair assembly.
//!
//! The contrastive surrogate replaces log π̂ with the energy
//! `E_θ(s,a) = E_{ρ̂(·|s,a)}[R + γ EV]`; holding occupancies, the policy, and
//! V fixed, its gradient coincides with the posterior gradient. The two
//! implementations here intentionally follow different algebraic routes so
//! that agreement is a meaningful numerical check rather than a tautology.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::gridworld::Dataset;
use crate::mdp::{self, softmax, OccupancyMeasure, SoftSolution, TabularMdp};

use super::theta::{GradientVector, RewardParam, ThetaParams};

/// Substitute for `ln 0` when a dataset transition has underflowed to zero
/// probability under P̂ (softmax rows never produce exact zeros except by
/// underflow or log-zero logits).
pub const LOG_CLAMP: f64 = -745.0;

/// Inner-solver settings.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: 100_000 }
    }
}

/// Soft-optimal solution of the learner MDP `(P̂_θ, R_θ)`; the exact inner
/// solve of the bi-level problem.
pub fn solve_policy(theta: &ThetaParams, discount: f64, opts: &SolveOptions) -> Result<SoftSolution> {
    let n = theta.n_states();
    let init = Array1::from_elem(n, 1.0 / n as f64);
    let mdp = theta.induced_mdp(discount, init)?;
    mdp::soft_value_iteration(&mdp, opts.tol, opts.max_iter)
}

/// Normalized transition weights of a dataset (or of an exact expert
/// distribution standing in for one): `sa` sums to 1 and `sas` refines it.
#[derive(Debug, Clone)]
pub struct DataWeights {
    pub sa: Array2<f64>,
    pub sas: Array3<f64>,
}

impl DataWeights {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let total = data.n_transitions();
        if total == 0.0 {
            return Err(Error::EmptyDataset);
        }
        Ok(DataWeights {
            sa: data.sa_counts.mapv(|c| c / total),
            sas: data.counts.mapv(|c| c / total),
        })
    }

    /// Population weights: the expert's exact normalized occupancy in the true
    /// environment refined by the true dynamics. Replaces the empirical
    /// average with exact expectations.
    pub fn from_exact(mdp_true: &TabularMdp, expert_policy: &Array2<f64>) -> Result<Self> {
        let occ: OccupancyMeasure = mdp::occupancy_measure(mdp_true, expert_policy)?;
        let (ns, na) = occ.d.dim();
        let mut sas = Array3::zeros((ns, na, ns));
        for s in 0..ns {
            for a in 0..na {
                for sp in 0..ns {
                    sas[[s, a, sp]] = occ.d[[s, a]] * mdp_true.transition[[s, a, sp]];
                }
            }
        }
        Ok(DataWeights { sa: occ.d, sas })
    }

    pub fn state_marginal(&self) -> Array1<f64> {
        self.sa.sum_axis(ndarray::Axis(1))
    }
}

/// Value, and its two addends, of the normalized log posterior at θ.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorEval {
    /// `policy_loglik + λ · dyn_loglik`.
    pub value: f64,
    pub policy_loglik: f64,
    pub dyn_loglik: f64,
    /// Set when some observed transition underflowed to zero probability and
    /// `ln` was clamped.
    pub clamped: bool,
}

pub(crate) fn data_dyn_loglik(weights: &DataWeights, p_hat: &Array3<f64>) -> (f64, bool) {
    let mut total = 0.0;
    let mut clamped = false;
    for (w, p) in weights.sas.iter().zip(p_hat.iter()) {
        if *w > 0.0 {
            if *p > 0.0 {
                total += w * p.ln();
            } else {
                total += w * LOG_CLAMP;
                clamped = true;
            }
        }
    }
    (total, clamped)
}

pub(crate) fn log_posterior_parts(
    sol: &SoftSolution,
    p_hat: &Array3<f64>,
    weights: &DataWeights,
    lambda: f64,
) -> PosteriorEval {
    let (ns, na) = sol.q.dim();
    let mut policy_loglik = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let w = weights.sa[[s, a]];
            if w > 0.0 {
                policy_loglik += w * (sol.q[[s, a]] - sol.v[s]);
            }
        }
    }
    let (dyn_loglik, clamped) = data_dyn_loglik(weights, p_hat);
    PosteriorEval { value: policy_loglik + lambda * dyn_loglik, policy_loglik, dyn_loglik, clamped }
}

/// Normalized log posterior `E_D[log π̂ + λ log P̂]` at θ, solving the inner
/// problem first.
pub fn log_posterior(
    theta: &ThetaParams,
    discount: f64,
    data: &Dataset,
    opts: &SolveOptions,
) -> Result<PosteriorEval> {
    let weights = DataWeights::from_dataset(data)?;
    let sol = solve_policy(theta, discount, opts)?;
    Ok(log_posterior_parts(&sol, &theta.transition(), &weights, theta.lambda))
}

/// As [`log_posterior`] but reusing an already-computed inner solution.
pub fn log_posterior_with(
    theta: &ThetaParams,
    sol: &SoftSolution,
    data: &Dataset,
) -> Result<PosteriorEval> {
    let weights = DataWeights::from_dataset(data)?;
    Ok(log_posterior_parts(sol, &theta.transition(), &weights, theta.lambda))
}

/// `EV[[s, a]] = Σ_{s'} P̂(s'|s, a) V(s')`.
pub(crate) fn ev_table(p_hat: &Array3<f64>, v: &Array1<f64>) -> Array2<f64> {
    let (ns, na, _) = p_hat.dim();
    let mut ev = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let mut acc = 0.0;
            for sp in 0..ns {
                acc += p_hat[[s, a, sp]] * v[sp];
            }
            ev[[s, a]] = acc;
        }
    }
    ev
}

/// Assembles `Σ_{s̃,ã} W(s̃,ã) · ∇[R(s̃,ã) + γ EV(s̃,ã)]` with V held fixed,
/// which equals the occupancy-weighted Q-gradient when W is a conditional
/// occupancy (or any signed combination of them).
pub(crate) fn assemble_gradient(
    theta: &ThetaParams,
    p_hat: &Array3<f64>,
    v: &Array1<f64>,
    ev: &Array2<f64>,
    weight_table: &Array2<f64>,
    discount: f64,
) -> GradientVector {
    let (ns, na) = weight_table.dim();
    let mut d_dynamics = Array3::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            let w = weight_table[[s, a]];
            if w != 0.0 {
                let base = discount * w;
                for m in 0..ns {
                    d_dynamics[[s, a, m]] = base * p_hat[[s, a, m]] * (v[m] - ev[[s, a]]);
                }
            }
        }
    }
    GradientVector { d_reward: reward_chain_rule(theta, weight_table), d_dynamics }
}

/// `Σ_{s,a} W(s,a) ∇R(s,a)` pushed through the reward parameterization:
/// the table itself in table mode, `σ − (Σσ)·softmax(θ₁)` in log-softmax
/// state mode (σ the state marginal of W).
pub(crate) fn reward_chain_rule(theta: &ThetaParams, weight_table: &Array2<f64>) -> RewardParam {
    match &theta.reward {
        RewardParam::StateLogits(logits) => {
            let sigma = weight_table.sum_axis(ndarray::Axis(1));
            let total = sigma.sum();
            let probs = softmax(logits.view());
            RewardParam::StateLogits(&sigma - &(probs * total))
        }
        RewardParam::Table(_) => RewardParam::Table(weight_table.clone()),
    }
}

fn conditional_weight(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    discount: f64,
    init: &Array2<f64>,
) -> Result<Array2<f64>> {
    mdp::discounted_flow(transition, policy, discount, init, mdp::FLOW_TOL)
}

/// Exact `∇ log π̂(a|s; θ)`: the Q-gradient at `(s, a)` minus its
/// policy-average over actions at `s`, computed through one signed-root flow
/// solve.
pub fn exact_policy_log_grad(
    theta: &ThetaParams,
    sol: &SoftSolution,
    discount: f64,
    s: usize,
    a: usize,
) -> Result<GradientVector> {
    let (ns, na) = sol.policy.dim();
    if s >= ns || a >= na {
        return Err(Error::IndexOutOfRange(format!("(s={s}, a={a}) outside [{ns} x {na}]")));
    }
    let p_hat = theta.transition();
    let mut init = Array2::zeros((ns, na));
    for other in 0..na {
        init[[s, other]] = -sol.policy[[s, other]];
    }
    init[[s, a]] += 1.0;
    let w = conditional_weight(&p_hat, &sol.policy, discount, &init)?;
    let ev = ev_table(&p_hat, &sol.v);
    Ok(assemble_gradient(theta, &p_hat, &sol.v, &ev, &w, discount))
}

/// The energy `E_θ(s, a) = E_{ρ̂(s̃,ã|s,a)}[R(s̃,ã) + γ EV(s̃,ã)]`, evaluated
/// literally through the conditional occupancy.
pub fn energy(
    theta: &ThetaParams,
    sol: &SoftSolution,
    discount: f64,
    s: usize,
    a: usize,
) -> Result<f64> {
    let (ns, na) = sol.policy.dim();
    if s >= ns || a >= na {
        return Err(Error::IndexOutOfRange(format!("(s={s}, a={a}) outside [{ns} x {na}]")));
    }
    let p_hat = theta.transition();
    let mut init = Array2::zeros((ns, na));
    init[[s, a]] = 1.0;
    let w = conditional_weight(&p_hat, &sol.policy, discount, &init)?;
    let reward = theta.reward_table();
    let ev = ev_table(&p_hat, &sol.v);
    let mut total = 0.0;
    for s in 0..ns {
        for a in 0..na {
            total += w[[s, a]] * (reward[[s, a]] + discount * ev[[s, a]]);
        }
    }
    Ok(total)
}

pub(crate) fn fake_root(weights: &DataWeights, policy: &Array2<f64>) -> Array2<f64> {
    let marginal = weights.state_marginal();
    let (ns, na) = policy.dim();
    Array2::from_shape_fn((ns, na), |(s, a)| marginal[s] * policy[[s, a]])
}

/// `E_D[E_θ(s,a)] − E_{s∼D, a∼π̂}[E_θ(s,a)] + λ E_D[log P̂(s'|s,a)]` with the
/// π̂-expectation taken exactly.
pub fn surrogate_objective_with(
    theta: &ThetaParams,
    sol: &SoftSolution,
    weights: &DataWeights,
    discount: f64,
) -> Result<f64> {
    let p_hat = theta.transition();
    let w_real = conditional_weight(&p_hat, &sol.policy, discount, &weights.sa)?;
    let w_fake = conditional_weight(&p_hat, &sol.policy, discount, &fake_root(weights, &sol.policy))?;
    let reward = theta.reward_table();
    let ev = ev_table(&p_hat, &sol.v);
    let (ns, na) = reward.dim();
    let mut contrast = 0.0;
    for s in 0..ns {
        for a in 0..na {
            contrast +=
                (w_real[[s, a]] - w_fake[[s, a]]) * (reward[[s, a]] + discount * ev[[s, a]]);
        }
    }
    let (dyn_loglik, _) = data_dyn_loglik(weights, &p_hat);
    Ok(contrast + theta.lambda * dyn_loglik)
}

/// As [`surrogate_objective_with`], solving the inner problem first.
pub fn surrogate_objective(
    theta: &ThetaParams,
    discount: f64,
    data: &Dataset,
    opts: &SolveOptions,
) -> Result<f64> {
    let weights = DataWeights::from_dataset(data)?;
    let sol = solve_policy(theta, discount, opts)?;
    surrogate_objective_with(theta, &sol, &weights, discount)
}

/// Gradient of the λ-weighted dynamics data-likelihood term:
/// `d[k,l,m] = w(k,l,m) − w(k,l)·P̂(m|k,l)`.
pub fn prior_gradient(weights: &DataWeights, p_hat: &Array3<f64>) -> Array3<f64> {
    let (ns, na, _) = p_hat.dim();
    let mut out = Array3::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            let w = weights.sa[[s, a]];
            if w != 0.0 {
                for m in 0..ns {
                    out[[s, a, m]] = weights.sas[[s, a, m]] - w * p_hat[[s, a, m]];
                }
            }
        }
    }
    out
}

/// Exact `∇L(θ)`: the dataset-weighted score gradient
/// `E_D[∇ log π̂(a|s)] + λ ∇ E_D[log P̂(s'|s,a)]`, computed through a single
/// flow solve with the signed root `w(s,a) − w(s)·π̂(a|s)`.
pub fn posterior_gradient(
    theta: &ThetaParams,
    sol: &SoftSolution,
    weights: &DataWeights,
    discount: f64,
) -> Result<GradientVector> {
    let p_hat = theta.transition();
    let fake = fake_root(weights, &sol.policy);
    let root = &weights.sa - &fake;
    let w = conditional_weight(&p_hat, &sol.policy, discount, &root)?;
    let ev = ev_table(&p_hat, &sol.v);
    let mut grad = assemble_gradient(theta, &p_hat, &sol.v, &ev, &w, discount);
    if theta.lambda != 0.0 {
        let prior = prior_gradient(weights, &p_hat);
        grad.d_dynamics.zip_mut_with(&prior, |x, y| *x += theta.lambda * y);
    }
    Ok(grad)
}

/// Gradient of the surrogate objective with occupancies, the policy, and V
/// held fixed: the real-branch/fake-branch contrast of occupancy-weighted
/// `∇[R + γ EV]` plus the prior term. Algebraically identical to
/// [`posterior_gradient`] but computed along the two-branch route.
pub fn surrogate_gradient(
    theta: &ThetaParams,
    sol: &SoftSolution,
    weights: &DataWeights,
    discount: f64,
) -> Result<GradientVector> {
    let p_hat = theta.transition();
    let w_real = conditional_weight(&p_hat, &sol.policy, discount, &weights.sa)?;
    let w_fake = conditional_weight(&p_hat, &sol.policy, discount, &fake_root(weights, &sol.policy))?;
    let ev = ev_table(&p_hat, &sol.v);
    let real = assemble_gradient(theta, &p_hat, &sol.v, &ev, &w_real, discount);
    let fake = assemble_gradient(theta, &p_hat, &sol.v, &ev, &w_fake, discount);
    let mut grad = real;
    grad.scaled_add(-1.0, &fake);
    if theta.lambda != 0.0 {
        let prior = prior_gradient(weights, &p_hat);
        grad.d_dynamics.zip_mut_with(&prior, |x, y| *x += theta.lambda * y);
    }
    Ok(grad)
}
