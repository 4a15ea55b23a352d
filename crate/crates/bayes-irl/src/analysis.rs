//! Numerical certification of the estimation theory: the discounted
//! likelihood decomposition, the value-mismatch bound on its dynamics term,
//! the expert-learner performance bound, and the reward/dynamics exchange
//! that leaves the policy invariant (unidentifiability witness).

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    log_posterior_with, solve_policy, RewardParam, SolveOptions, ThetaParams,
};
use crate::gridworld::Dataset;
use crate::mdp::{self, TabularMdp};

/// Decomposition of the expert-occupancy discounted policy log-likelihood
/// into `ell_theta` (real-environment reward minus initial value) and `t1`
/// (the value difference under estimated vs true dynamics):
/// `discounted_loglik = ell_theta + t1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub discounted_loglik: f64,
    pub ell_theta: f64,
    pub t1: f64,
    /// `|discounted_loglik − (ell_theta + t1)|`; ≤ 1e-8 with exact occupancies.
    pub residual: f64,
    /// Dynamics estimation error `E_{d}[KL(P ‖ P̂)]` under the expert's
    /// normalized discounted state-action marginal.
    pub epsilon_kl: f64,
}

/// Performance-bound certificate: the observed expert-learner gap against
/// `eps_policy/(1−γ) + γ(C+1)·r_max/(1−γ)²·sqrt(2·eps_dynamics)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_policy: f64,
    pub eps_dynamics: f64,
    /// Sup of `d_P^π̂ / d_P^π` over the learner marginal's support;
    /// infinite (serialized as null) when the expert marginal vanishes there.
    pub density_ratio_c: f64,
    pub r_max: f64,
    pub gamma: f64,
    pub bound: f64,
    pub observed_gap: f64,
    pub holds: bool,
    /// Marks a vacuously-true bound caused by an unbounded density ratio.
    pub c_infinite: bool,
}

fn kl_divergence_row(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            if qi > 0.0 {
                total += pi * (pi / qi).ln();
            } else {
                return f64::INFINITY;
            }
        }
    }
    // Rounding can push a KL of zero a few ulps negative.
    total.max(0.0)
}

/// `R_max = max |R_θ| + ln |A|`, the value-scale constant of the bounds.
fn reward_scale(theta: &ThetaParams) -> f64 {
    let reward = theta.reward_table();
    reward.iter().fold(0.0f64, |acc, r| acc.max(r.abs())) + (theta.n_actions() as f64).ln()
}

/// Evaluates the likelihood decomposition with exact expert occupancies.
pub fn decompose_likelihood(
    theta: &ThetaParams,
    mdp_true: &TabularMdp,
    expert_policy: &Array2<f64>,
    opts: &SolveOptions,
) -> Result<DecompositionReport> {
    let gamma = mdp_true.discount;
    let sol = solve_policy(theta, gamma, opts)?;
    let occ = mdp::occupancy_measure(mdp_true, expert_policy)?;
    let p_hat = theta.transition();
    let reward = theta.reward_table();
    let (ns, na) = reward.dim();

    let mut discounted_loglik = 0.0;
    let mut reward_term = 0.0;
    let mut t1 = 0.0;
    let mut epsilon_kl = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let w = occ.rho[[s, a]];
            if w != 0.0 {
                discounted_loglik += w * (sol.q[[s, a]] - sol.v[s]);
                reward_term += w * reward[[s, a]];
                let mut ev_hat = 0.0;
                let mut ev_true = 0.0;
                for sp in 0..ns {
                    ev_hat += p_hat[[s, a, sp]] * sol.v[sp];
                    ev_true += mdp_true.transition[[s, a, sp]] * sol.v[sp];
                }
                t1 += gamma * w * (ev_hat - ev_true);
            }
            let d = occ.d[[s, a]];
            if d > 0.0 {
                let p_row: Vec<f64> = (0..ns).map(|sp| mdp_true.transition[[s, a, sp]]).collect();
                let q_row: Vec<f64> = (0..ns).map(|sp| p_hat[[s, a, sp]]).collect();
                epsilon_kl += d * kl_divergence_row(&p_row, &q_row);
            }
        }
    }
    let init_value: f64 = (0..ns).map(|s| mdp_true.init_dist[s] * sol.v[s]).sum();
    let ell_theta = reward_term - init_value;
    let residual = (discounted_loglik - (ell_theta + t1)).abs();
    Ok(DecompositionReport { discounted_loglik, ell_theta, t1, residual, epsilon_kl })
}

/// Bound on the dynamics-mismatch term:
/// `|t1| ≤ γ·R_max/(1−γ)² · sqrt(2 ε)` with `ε` the expert-marginal KL error.
pub fn t1_bound(
    theta: &ThetaParams,
    mdp_true: &TabularMdp,
    expert_policy: &Array2<f64>,
    opts: &SolveOptions,
) -> Result<f64> {
    let report = decompose_likelihood(theta, mdp_true, expert_policy, opts)?;
    Ok(t1_bound_value(report.epsilon_kl, reward_scale(theta), mdp_true.discount))
}

/// `γ·r_max/(1−γ)² · sqrt(2 ε)`.
pub fn t1_bound_value(epsilon: f64, r_max: f64, gamma: f64) -> f64 {
    let sqrt_term = (2.0 * epsilon).max(0.0).sqrt();
    if sqrt_term == 0.0 {
        return 0.0;
    }
    gamma * r_max / (1.0 - gamma).powi(2) * sqrt_term
}

/// `eps_pi/(1−γ) + γ(C+1)·r_max/(1−γ)² · sqrt(2·eps_p)`; the second addend is
/// zero when `eps_p` is zero regardless of C.
pub fn theorem_bound_value(eps_pi: f64, eps_p: f64, c: f64, r_max: f64, gamma: f64) -> f64 {
    let first = eps_pi / (1.0 - gamma);
    let sqrt_term = (2.0 * eps_p).max(0.0).sqrt();
    if sqrt_term == 0.0 {
        return first;
    }
    first + gamma * (c + 1.0) * r_max / (1.0 - gamma).powi(2) * sqrt_term
}

/// Certifies the performance bound for the learner induced by θ against the
/// expert policy in the true environment.
pub fn performance_bound(
    theta: &ThetaParams,
    mdp_true: &TabularMdp,
    expert_policy: &Array2<f64>,
    opts: &SolveOptions,
) -> Result<BoundReport> {
    let gamma = mdp_true.discount;
    let sol = solve_policy(theta, gamma, opts)?;
    let expert_occ = mdp::occupancy_measure(mdp_true, expert_policy)?;
    let learner_occ = mdp::occupancy_measure(mdp_true, &sol.policy)?;
    let p_hat = theta.transition();
    let (ns, na) = sol.policy.dim();

    let mut eps_policy = 0.0;
    let mut eps_dynamics = 0.0;
    let mut c = 0.0f64;
    let mut c_infinite = false;
    for s in 0..ns {
        for a in 0..na {
            let d = expert_occ.d[[s, a]];
            if d > 0.0 {
                eps_policy -= d * (sol.q[[s, a]] - sol.v[s]);
                let p_row: Vec<f64> = (0..ns).map(|sp| mdp_true.transition[[s, a, sp]]).collect();
                let q_row: Vec<f64> = (0..ns).map(|sp| p_hat[[s, a, sp]]).collect();
                eps_dynamics += d * kl_divergence_row(&p_row, &q_row);
            }
            let d_learner = learner_occ.d[[s, a]];
            if d_learner > 0.0 {
                if d > 0.0 {
                    c = c.max(d_learner / d);
                } else {
                    c_infinite = true;
                }
            }
        }
    }
    if c_infinite {
        c = f64::INFINITY;
    }
    let r_max = reward_scale(theta);
    let expert_j = mdp::discounted_return(mdp_true, expert_policy)?;
    let learner_j = mdp::discounted_return(mdp_true, &sol.policy)?;
    let observed_gap = (learner_j - expert_j).abs();
    let bound = theorem_bound_value(eps_policy, eps_dynamics, c, r_max, gamma);
    let holds = if bound.is_infinite() { true } else { observed_gap <= bound + 1e-9 };
    Ok(BoundReport {
        eps_policy,
        eps_dynamics,
        density_ratio_c: c,
        r_max,
        gamma,
        bound,
        observed_gap,
        holds,
        c_infinite,
    })
}

/// Result of applying a dynamics perturbation with the compensating reward
/// change `ΔR(s,a) = −γ Σ_{s'} ΔP(s'|s,a) V_θ(s')`.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessReport {
    pub policy_distance: f64,
    pub q_distance: f64,
    pub v_distance: f64,
}

/// Builds θ' = (R + ΔR, P̂ + ΔP) and returns it with the sup-norm distance
/// between the original and perturbed soft-optimal policies. The perturbed
/// reward is a raw table: the compensated reward generally leaves the
/// log-softmax family.
pub fn unidentifiability_witness(
    theta: &ThetaParams,
    discount: f64,
    delta_p: &Array3<f64>,
    opts: &SolveOptions,
) -> Result<(ThetaParams, f64)> {
    let (theta_prime, report) = witness_with_report(theta, discount, delta_p, opts)?;
    Ok((theta_prime, report.policy_distance))
}

/// As [`unidentifiability_witness`], also reporting Q and V distances.
pub fn witness_with_report(
    theta: &ThetaParams,
    discount: f64,
    delta_p: &Array3<f64>,
    opts: &SolveOptions,
) -> Result<(ThetaParams, WitnessReport)> {
    let (ns, na, _) = theta.dynamics_logits.dim();
    if delta_p.dim() != (ns, na, ns) {
        return Err(Error::ShapeMismatch {
            expected: format!("delta table [{ns} x {na} x {ns}]"),
            got: format!("{:?}", delta_p.dim()),
        });
    }
    let p_hat = theta.transition();
    let mut p_prime = &p_hat + delta_p;
    for s in 0..ns {
        for a in 0..na {
            let mut row_sum = 0.0;
            for sp in 0..ns {
                let x = p_prime[[s, a, sp]];
                if x < -1e-12 {
                    return Err(Error::InvalidPerturbation(format!(
                        "P'({sp}|{s},{a}) = {x} is negative"
                    )));
                }
                if x < 0.0 {
                    p_prime[[s, a, sp]] = 0.0;
                }
                row_sum += p_prime[[s, a, sp]];
            }
            if (row_sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidPerturbation(format!(
                    "perturbed row (s={s}, a={a}) sums to {row_sum}"
                )));
            }
        }
    }
    let sol = solve_policy(theta, discount, opts)?;
    let reward = theta.reward_table();
    let mut reward_prime = reward.clone();
    for s in 0..ns {
        for a in 0..na {
            let mut shift = 0.0;
            for sp in 0..ns {
                shift += delta_p[[s, a, sp]] * sol.v[sp];
            }
            reward_prime[[s, a]] -= discount * shift;
        }
    }
    let theta_prime = ThetaParams::new(
        RewardParam::Table(reward_prime),
        p_prime.mapv(f64::ln),
        theta.lambda,
    )?;
    let sol_prime = solve_policy(&theta_prime, discount, opts)?;
    let sup = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| {
        a.iter().zip(b.iter()).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
    };
    let report = WitnessReport {
        policy_distance: sup(&sol.policy, &sol_prime.policy),
        q_distance: sup(&sol.q, &sol_prime.q),
        v_distance: sol
            .v
            .iter()
            .zip(sol_prime.v.iter())
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())),
    };
    Ok((theta_prime, report))
}

/// Deterministic perturbation used by the certification drive: shifts `delta`
/// of probability off the most-observed successor of the most-visited
/// dataset pair, spread uniformly over the remaining successors.
pub fn witness_perturbation(
    theta: &ThetaParams,
    data: &Dataset,
    delta: f64,
) -> Result<Array3<f64>> {
    let (ns, na, _) = theta.dynamics_logits.dim();
    let mut best = (0usize, 0usize);
    for s in 0..ns {
        for a in 0..na {
            if data.sa_counts[[s, a]] > data.sa_counts[[best.0, best.1]] {
                best = (s, a);
            }
        }
    }
    let (s, a) = best;
    if data.sa_counts[[s, a]] == 0.0 {
        return Err(Error::EmptyDataset);
    }
    let mut obs = 0usize;
    for sp in 0..ns {
        if data.counts[[s, a, sp]] > data.counts[[s, a, obs]] {
            obs = sp;
        }
    }
    let p_hat = theta.transition();
    let shift = delta.min(p_hat[[s, a, obs]] / 2.0);
    let mut delta_p = Array3::zeros((ns, na, ns));
    delta_p[[s, a, obs]] = -shift;
    for sp in 0..ns {
        if sp != obs {
            delta_p[[s, a, sp]] = shift / (ns - 1) as f64;
        }
    }
    Ok(delta_p)
}

/// Checks `log_posterior(θ') < log_posterior(θ)` for a witness pair under the
/// dataset, returning both values.
pub fn witness_posterior_drop(
    theta: &ThetaParams,
    theta_prime: &ThetaParams,
    discount: f64,
    data: &Dataset,
    opts: &SolveOptions,
) -> Result<(f64, f64)> {
    let sol = solve_policy(theta, discount, opts)?;
    let sol_prime = solve_policy(theta_prime, discount, opts)?;
    let base = log_posterior_with(theta, &sol, data)?;
    let prime = log_posterior_with(theta_prime, &sol_prime, data)?;
    Ok((base.value, prime.value))
}
