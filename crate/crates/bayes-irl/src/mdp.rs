//! Exact tabular machinery: MDP representation, entropy-regularized (soft)
//! value iteration, discounted occupancy measures, and returns.
//!
//! The planner solves
//!
//! ```text
//! V(s) = log Σ_a exp(Q(s, a)),   Q(s, a) = R(s, a) + γ Σ_{s'} P(s'|s, a) V(s')
//! ```
//!
//! whose optimal policy is `π(a|s) ∝ exp(Q(s, a))`. Occupancy measures solve
//! the discounted flow equation `ρ(s,a) = π(a|s)·[µ(s) + γ Σ P(s|s̃,ã) ρ(s̃,ã)]`
//! by a dense linear solve at desk scale and by geometric-series iteration
//! beyond it.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums and the initial distribution must match 1 this tightly inside the
/// core types; JSON loads are accepted at 1e-9 and renormalized.
pub const STRICT_DIST_TOL: f64 = 1e-12;
/// Tolerance applied when validating externally supplied distributions.
pub const LOAD_DIST_TOL: f64 = 1e-9;
/// Default residual tolerance for occupancy solves.
pub const FLOW_TOL: f64 = 1e-10;
/// Above this many state-action pairs the occupancy solve switches from a
/// dense LU factorization to geometric-series iteration.
const DENSE_FLOW_LIMIT: usize = 10_000;

/// Ground-truth tabular environment: transition tensor, reward table, initial
/// distribution, and discount.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[[s, a, s']] = P(s'|s, a)`; every `(s, a)` row is a distribution.
    pub transition: Array3<f64>,
    /// `reward[[s, a]]` in reward units.
    pub reward: Array2<f64>,
    pub init_dist: Array1<f64>,
    /// Discount strictly inside (0, 1).
    pub discount: f64,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        init_dist: Array1<f64>,
        discount: f64,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        if n_next != n_states {
            return Err(Error::ShapeMismatch {
                expected: format!("transition [{n_states} x {n_actions} x {n_states}]"),
                got: format!("[{n_states} x {n_actions} x {n_next}]"),
            });
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::ShapeMismatch {
                expected: format!("reward [{n_states} x {n_actions}]"),
                got: format!("[{} x {}]", reward.dim().0, reward.dim().1),
            });
        }
        if init_dist.len() != n_states {
            return Err(Error::ShapeMismatch {
                expected: format!("init_dist [{n_states}]"),
                got: format!("[{}]", init_dist.len()),
            });
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!(
                "discount must lie strictly inside (0, 1), got {discount}"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                validate_distribution(
                    transition.slice(ndarray::s![s, a, ..]).view(),
                    STRICT_DIST_TOL,
                    &format!("transition row (s={s}, a={a})"),
                )?;
            }
        }
        validate_distribution(init_dist.view(), STRICT_DIST_TOL, "init_dist")?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("reward entries must be finite".into()));
        }
        Ok(Self { n_states, n_actions, transition, reward, init_dist, discount })
    }

    /// Draws a random dense MDP; transition rows and the initial distribution
    /// are normalized positive vectors, rewards are uniform in [-1, 1].
    pub fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                for (sp, p) in row.into_iter().enumerate() {
                    transition[[s, a, sp]] = p;
                }
            }
        }
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.gen_range(-1.0..1.0));
        let mut init: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = init.iter().sum();
        init.iter_mut().for_each(|p| *p /= total);
        Self::new(transition, reward, Array1::from(init), discount)
            .expect("randomly generated MDP is valid by construction")
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = MdpJson::from(self);
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses the JSON schema (`n_states`, `n_actions`, `transition` as nested
    /// `[s][a][s']` arrays, `reward` as `[s][a]`, `init_dist`, `discount`).
    /// Probability rows are accepted within 1e-9 of total mass 1 and
    /// renormalized before the strict core invariants apply.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: MdpJson = serde_json::from_str(text)?;
        doc.into_mdp()
    }
}

fn validate_distribution(row: ArrayView1<f64>, tol: f64, what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidMdp(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::InvalidMdp(format!(
            "{what} sums to {total} (must be 1 within {tol:.0e})"
        )));
    }
    Ok(())
}

/// Validates a policy table: each row of `policy[[s, a]]` must be a
/// distribution over actions within `LOAD_DIST_TOL`.
pub fn validate_policy(policy: &Array2<f64>, n_states: usize, n_actions: usize) -> Result<()> {
    if policy.dim() != (n_states, n_actions) {
        return Err(Error::ShapeMismatch {
            expected: format!("policy [{n_states} x {n_actions}]"),
            got: format!("[{} x {}]", policy.dim().0, policy.dim().1),
        });
    }
    for s in 0..n_states {
        validate_distribution(policy.row(s), LOAD_DIST_TOL, &format!("policy row s={s}"))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    init_dist: Vec<f64>,
    discount: f64,
}

impl From<&TabularMdp> for MdpJson {
    fn from(m: &TabularMdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| (0..m.n_states).map(|sp| m.transition[[s, a, sp]]).collect())
                    .collect()
            })
            .collect();
        let reward = (0..m.n_states)
            .map(|s| (0..m.n_actions).map(|a| m.reward[[s, a]]).collect())
            .collect();
        MdpJson {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition,
            reward,
            init_dist: m.init_dist.to_vec(),
            discount: m.discount,
        }
    }
}

impl MdpJson {
    fn into_mdp(self) -> Result<TabularMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut transition = Array3::zeros((ns, na, ns));
        if self.transition.len() != ns {
            return Err(Error::InvalidMdp("transition outer length != n_states".into()));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != na {
                return Err(Error::InvalidMdp(format!(
                    "transition[{s}] length != n_actions"
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::InvalidMdp(format!(
                        "transition[{s}][{a}] length != n_states"
                    )));
                }
                validate_distribution(
                    ArrayView1::from(row.as_slice()),
                    LOAD_DIST_TOL,
                    &format!("transition row (s={s}, a={a})"),
                )?;
                let total: f64 = row.iter().sum();
                for (sp, p) in row.iter().enumerate() {
                    transition[[s, a, sp]] = p / total;
                }
            }
        }
        if self.reward.len() != ns || self.reward.iter().any(|r| r.len() != na) {
            return Err(Error::InvalidMdp("reward shape mismatch".into()));
        }
        let reward = Array2::from_shape_fn((ns, na), |(s, a)| self.reward[s][a]);
        validate_distribution(
            ArrayView1::from(self.init_dist.as_slice()),
            LOAD_DIST_TOL,
            "init_dist",
        )?;
        let total: f64 = self.init_dist.iter().sum();
        let init = Array1::from_iter(self.init_dist.iter().map(|p| p / total));
        TabularMdp::new(transition, reward, init, self.discount)
    }
}

/// Optimal entropy-regularized solution for one (reward, dynamics) pair.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q: Array2<f64>,
    pub v: Array1<f64>,
    /// `policy[[s, a]] = exp(q[[s, a]] - v[s])`.
    pub policy: Array2<f64>,
    /// Sup-norm of `q - (R + γ P v)` at the returned tables.
    pub bellman_residual: f64,
}

/// Log-sum-exp with max subtraction; safe for inputs up to the overflow edge
/// and for `-inf` entries (at least one entry must be finite).
pub fn log_sum_exp(xs: ArrayView1<f64>) -> f64 {
    let m = xs.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction. `-inf` entries map to probability zero.
pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let m = xs.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    let mut out = Array1::from_iter(xs.iter().map(|&x| (x - m).exp()));
    let total = out.sum();
    out.mapv_inplace(|p| p / total);
    out
}

/// Entropy of a distribution with the 0·log 0 = 0 convention.
pub fn entropy(row: ArrayView1<f64>) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// One soft Bellman sweep `V ← logsumexp_a(R + γ P V)`.
pub fn soft_backup(mdp: &TabularMdp, v: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(mdp.n_states);
    for s in 0..mdp.n_states {
        let mut q_row = Array1::zeros(mdp.n_actions);
        for a in 0..mdp.n_actions {
            let mut ev = 0.0;
            for sp in 0..mdp.n_states {
                ev += mdp.transition[[s, a, sp]] * v[sp];
            }
            q_row[a] = mdp.reward[[s, a]] + mdp.discount * ev;
        }
        out[s] = log_sum_exp(q_row.view());
    }
    out
}

fn assemble_solution(mdp: &TabularMdp, v_fixed: &Array1<f64>) -> SoftSolution {
    let mut q = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut ev = 0.0;
            for sp in 0..mdp.n_states {
                ev += mdp.transition[[s, a, sp]] * v_fixed[sp];
            }
            q[[s, a]] = mdp.reward[[s, a]] + mdp.discount * ev;
        }
    }
    let mut v = Array1::zeros(mdp.n_states);
    let mut policy = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        v[s] = log_sum_exp(q.row(s));
        let row = softmax(q.row(s));
        policy.row_mut(s).assign(&row);
    }
    // Residual of the returned tables, not of the final iterate.
    let mut residual = 0.0f64;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut ev = 0.0;
            for sp in 0..mdp.n_states {
                ev += mdp.transition[[s, a, sp]] * v[sp];
            }
            residual = residual.max((q[[s, a]] - (mdp.reward[[s, a]] + mdp.discount * ev)).abs());
        }
    }
    SoftSolution { q, v, policy, bellman_residual: residual }
}

/// Soft value iteration from a zero initial value function.
///
/// Converges when the sup-norm change of V between sweeps drops to `tol`;
/// failing that within `max_iter` sweeps is an explicit error carrying the
/// final residual.
pub fn soft_value_iteration(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<SoftSolution> {
    soft_value_iteration_from(mdp, &Array1::zeros(mdp.n_states), tol, max_iter)
}

/// Soft value iteration warm-started from `v0`.
pub fn soft_value_iteration_from(
    mdp: &TabularMdp,
    v0: &Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    if tol <= 0.0 || max_iter == 0 {
        return Err(Error::InvalidConfig(
            "soft value iteration needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    let mut v = v0.clone();
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        let v_new = soft_backup(mdp, &v);
        delta = v_new
            .iter()
            .zip(v.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        v = v_new;
        if delta <= tol {
            return Ok(assemble_solution(mdp, &v));
        }
    }
    Err(Error::SolverDidNotConverge { residual: delta, tol, max_iter })
}

/// Exactly `sweeps` Bellman sweeps from `v0` with no convergence requirement;
/// the returned solution reports whatever residual the truncated iteration
/// reached. Used for two-timescale style partial inner solves.
pub fn soft_sweeps(mdp: &TabularMdp, v0: &Array1<f64>, sweeps: usize) -> SoftSolution {
    let mut v = v0.clone();
    for _ in 0..sweeps {
        v = soft_backup(mdp, &v);
    }
    assemble_solution(mdp, &v)
}

/// Discounted occupancy `rho` (total mass 1/(1-γ) for a probability
/// initialization) and its normalized marginal `d = (1-γ)·rho`.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    pub rho: Array2<f64>,
    pub d: Array2<f64>,
}

impl OccupancyMeasure {
    fn from_rho(rho: Array2<f64>, discount: f64) -> Self {
        let d = rho.mapv(|x| x * (1.0 - discount));
        OccupancyMeasure { rho, d }
    }

    /// Marginal over states: `σ(s) = Σ_a rho[[s, a]]`.
    pub fn state_rho(&self) -> Array1<f64> {
        self.rho.sum_axis(ndarray::Axis(1))
    }
}

/// Solves the discounted flow equation
/// `rho = init + γ · π ⊙ broadcast(Pᵀ rho)` for an arbitrary (possibly
/// signed) initialization table. Occupancy measures use
/// `init[s,a] = π(a|s) µ(s)`; conditional occupancies use a point mass.
pub(crate) fn discounted_flow(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    discount: f64,
    init: &Array2<f64>,
    tol: f64,
) -> Result<Array2<f64>> {
    let (n_states, n_actions, _) = transition.dim();
    let rho = if n_states * n_actions <= DENSE_FLOW_LIMIT {
        dense_flow(transition, policy, discount, init)?
    } else {
        iterative_flow(transition, policy, discount, init, tol)
    };
    let residual = flow_residual(transition, policy, discount, init, &rho);
    if !residual.is_finite() || residual > tol {
        return Err(Error::OccupancySolve { residual, tol });
    }
    Ok(rho)
}

fn dense_flow(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    discount: f64,
    init: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (n_states, n_actions, _) = transition.dim();
    // u(s') = Σ_{s,a} P(s'|s,a) rho(s,a) satisfies (I - γ Mᵀ) u = Pᵀ init with
    // M[s,s'] = Σ_a π(a|s) P(s'|s,a).
    let mut a_mat = nalgebra::DMatrix::<f64>::identity(n_states, n_states);
    for s in 0..n_states {
        for sp in 0..n_states {
            let mut m = 0.0;
            for a in 0..n_actions {
                m += policy[[s, a]] * transition[[s, a, sp]];
            }
            a_mat[(sp, s)] -= discount * m;
        }
    }
    let mut b = nalgebra::DVector::<f64>::zeros(n_states);
    for s in 0..n_states {
        for a in 0..n_actions {
            let w = init[[s, a]];
            if w != 0.0 {
                for sp in 0..n_states {
                    b[sp] += transition[[s, a, sp]] * w;
                }
            }
        }
    }
    let u = a_mat
        .lu()
        .solve(&b)
        .ok_or(Error::OccupancySolve { residual: f64::INFINITY, tol: 0.0 })?;
    let mut rho = init.clone();
    for s in 0..n_states {
        for a in 0..n_actions {
            rho[[s, a]] += discount * policy[[s, a]] * u[s];
        }
    }
    Ok(rho)
}

fn iterative_flow(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    discount: f64,
    init: &Array2<f64>,
    tol: f64,
) -> Array2<f64> {
    let (n_states, n_actions, _) = transition.dim();
    let mass: f64 = init.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    let needed = (tol * (1.0 - discount) / mass).ln() / discount.ln();
    let max_iter = needed.ceil().max(1.0) as usize + 16;
    let mut rho = init.clone();
    for _ in 0..max_iter {
        let mut u = Array1::<f64>::zeros(n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                let w = rho[[s, a]];
                if w != 0.0 {
                    for sp in 0..n_states {
                        u[sp] += transition[[s, a, sp]] * w;
                    }
                }
            }
        }
        let mut next = init.clone();
        let mut delta = 0.0f64;
        for s in 0..n_states {
            for a in 0..n_actions {
                next[[s, a]] += discount * policy[[s, a]] * u[s];
                delta = delta.max((next[[s, a]] - rho[[s, a]]).abs());
            }
        }
        rho = next;
        if delta <= tol * (1.0 - discount) / discount.max(tol) {
            break;
        }
    }
    rho
}

fn flow_residual(
    transition: &Array3<f64>,
    policy: &Array2<f64>,
    discount: f64,
    init: &Array2<f64>,
    rho: &Array2<f64>,
) -> f64 {
    let (n_states, n_actions, _) = transition.dim();
    let mut u = Array1::<f64>::zeros(n_states);
    for s in 0..n_states {
        for a in 0..n_actions {
            let w = rho[[s, a]];
            if w != 0.0 {
                for sp in 0..n_states {
                    u[sp] += transition[[s, a, sp]] * w;
                }
            }
        }
    }
    let mut residual = 0.0f64;
    for s in 0..n_states {
        for a in 0..n_actions {
            let rhs = init[[s, a]] + discount * policy[[s, a]] * u[s];
            residual = residual.max((rho[[s, a]] - rhs).abs());
        }
    }
    residual
}

/// Discounted occupancy of `policy` in `mdp`, rooted at the initial
/// distribution.
pub fn occupancy_measure(mdp: &TabularMdp, policy: &Array2<f64>) -> Result<OccupancyMeasure> {
    validate_policy(policy, mdp.n_states, mdp.n_actions)?;
    let mut init = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            init[[s, a]] = policy[[s, a]] * mdp.init_dist[s];
        }
    }
    let rho = discounted_flow(&mdp.transition, policy, mdp.discount, &init, FLOW_TOL)?;
    Ok(OccupancyMeasure::from_rho(rho, mdp.discount))
}

/// Discounted occupancy rooted at the state-action pair `(s0, a0)`; total
/// mass 1/(1-γ).
pub fn conditional_occupancy(
    mdp: &TabularMdp,
    policy: &Array2<f64>,
    s0: usize,
    a0: usize,
) -> Result<OccupancyMeasure> {
    validate_policy(policy, mdp.n_states, mdp.n_actions)?;
    if s0 >= mdp.n_states || a0 >= mdp.n_actions {
        return Err(Error::IndexOutOfRange(format!(
            "(s0={s0}, a0={a0}) outside [{} x {}]",
            mdp.n_states, mdp.n_actions
        )));
    }
    let mut init = Array2::zeros((mdp.n_states, mdp.n_actions));
    init[[s0, a0]] = 1.0;
    let rho = discounted_flow(&mdp.transition, policy, mdp.discount, &init, FLOW_TOL)?;
    Ok(OccupancyMeasure::from_rho(rho, mdp.discount))
}

/// Entropy-inclusive return `J_P(π) = Σ ρ(s,a)·R(s,a) + Σ σ(s)·H(π(·|s))`.
pub fn discounted_return(mdp: &TabularMdp, policy: &Array2<f64>) -> Result<f64> {
    let occ = occupancy_measure(mdp, policy)?;
    let sigma = occ.state_rho();
    let mut j = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            j += occ.rho[[s, a]] * mdp.reward[[s, a]];
        }
        j += sigma[s] * entropy(policy.row(s));
    }
    Ok(j)
}

/// Reward-only return, without the policy entropy term.
pub fn discounted_return_reward_only(mdp: &TabularMdp, policy: &Array2<f64>) -> Result<f64> {
    let occ = occupancy_measure(mdp, policy)?;
    let mut j = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            j += occ.rho[[s, a]] * mdp.reward[[s, a]];
        }
    }
    Ok(j)
}

/// Horizon after which the discounted tail mass drops below `tail_tol`:
/// `ceil(ln tail_tol / ln γ)`.
pub fn horizon_for_tail(discount: f64, tail_tol: f64) -> usize {
    (tail_tol.ln() / discount.ln()).ceil().max(1.0) as usize
}

/// Coarse truncation heuristic `int(1/(1-γ))`; exposed alongside the
/// tolerance-based horizon, which is the default everywhere in this crate.
pub fn coarse_horizon(discount: f64) -> usize {
    (1.0 / (1.0 - discount)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn single_state_mdp(n_actions: usize, reward: f64, discount: f64) -> TabularMdp {
        let transition = Array3::from_elem((1, n_actions, 1), 1.0);
        let reward = Array2::from_elem((1, n_actions), reward);
        TabularMdp::new(transition, reward, array![1.0], discount).unwrap()
    }

    #[test]
    fn soft_vi_single_state_single_action_zero_reward() {
        let mdp = single_state_mdp(1, 0.0, 0.9);
        let sol = soft_value_iteration(&mdp, 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(sol.v[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.q[[0, 0]], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.policy[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn soft_vi_single_state_two_actions_pure_entropy() {
        // V = ln 2 + γ V  =>  V = ln(2) / (1 - γ)
        let mdp = single_state_mdp(2, 0.0, 0.9);
        let sol = soft_value_iteration(&mdp, 1e-12, 100_000).unwrap();
        assert_abs_diff_eq!(sol.v[0], 2.0f64.ln() / 0.1, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.policy[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.policy[[0, 1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn soft_vi_solution_invariants_on_random_mdp() {
        let mdp = TabularMdp::random(6, 3, 0.9, 11);
        let sol = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
        assert!(sol.bellman_residual <= 1e-10);
        for s in 0..mdp.n_states {
            assert_abs_diff_eq!(sol.v[s], log_sum_exp(sol.q.row(s)), epsilon = 1e-12);
            let soft = softmax(sol.q.row(s));
            for a in 0..mdp.n_actions {
                assert_abs_diff_eq!(sol.policy[[s, a]], soft[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn soft_vi_reports_non_convergence() {
        let mdp = TabularMdp::random(5, 2, 0.99, 3);
        let err = soft_value_iteration(&mdp, 1e-12, 3).unwrap_err();
        match err {
            Error::SolverDidNotConverge { residual, max_iter, .. } => {
                assert!(residual > 1e-12);
                assert_eq!(max_iter, 3);
            }
            other => panic!("expected SolverDidNotConverge, got {other:?}"),
        }
    }

    #[test]
    fn soft_vi_contraction_between_sweeps() {
        let mdp = TabularMdp::random(5, 3, 0.85, 21);
        let mut v_prev = Array1::zeros(mdp.n_states);
        let mut v = soft_backup(&mdp, &v_prev);
        let mut last_delta = v
            .iter()
            .zip(v_prev.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        for _ in 0..200 {
            let v_next = soft_backup(&mdp, &v);
            let delta = v_next
                .iter()
                .zip(v.iter())
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            assert!(
                delta <= mdp.discount * last_delta + 1e-12,
                "sweep contraction violated: {delta} > γ·{last_delta}"
            );
            v_prev = v;
            v = v_next;
            last_delta = delta;
            let _ = &v_prev;
        }
    }

    #[test]
    fn soft_vi_value_magnitude_bound() {
        for seed in 0..5u64 {
            let mdp = TabularMdp::random(6, 4, 0.9, 100 + seed);
            let sol = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
            let r_max = mdp.reward.iter().fold(0.0f64, |acc, r| acc.max(r.abs()))
                + (mdp.n_actions as f64).ln();
            let bound = r_max / (1.0 - mdp.discount);
            for s in 0..mdp.n_states {
                assert!(sol.v[s].abs() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn occupancy_total_mass_single_state() {
        let mdp = single_state_mdp(2, 0.3, 0.9);
        let policy = array![[0.25, 0.75]];
        let occ = occupancy_measure(&mdp, &policy).unwrap();
        assert_abs_diff_eq!(occ.rho.sum(), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(occ.d.sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn occupancy_symmetric_chain_is_uniform() {
        // Two states, two actions, action 0 stays and action 1 swaps; uniform
        // policy and uniform start make everything symmetric.
        let mut transition = Array3::zeros((2, 2, 2));
        for s in 0..2 {
            transition[[s, 0, s]] = 1.0;
            transition[[s, 1, 1 - s]] = 1.0;
        }
        let mdp = TabularMdp::new(
            transition,
            Array2::zeros((2, 2)),
            array![0.5, 0.5],
            0.8,
        )
        .unwrap();
        let policy = Array2::from_elem((2, 2), 0.5);
        let occ = occupancy_measure(&mdp, &policy).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(occ.d[[s, a]], 0.25, epsilon = 1e-10);
            }
        }
    }

    /// Monte-Carlo rollout oracle for occupancy measures: truncated sampled
    /// rollouts, independent of the linear-solve path.
    fn rollout_occupancy_estimate(
        mdp: &TabularMdp,
        policy: &Array2<f64>,
        n_rollouts: usize,
        seed: u64,
    ) -> (Array2<f64>, Array2<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let horizon = horizon_for_tail(mdp.discount, 1e-9);
        let mut mean = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
        let mut m2 = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
        let sample_row = |rng: &mut rand_chacha::ChaCha8Rng, row: ArrayView1<f64>| -> usize {
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last = i;
                    acc += p;
                    if r < acc {
                        return i;
                    }
                }
            }
            last
        };
        for i in 0..n_rollouts {
            let mut visit = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
            let mut s = sample_row(&mut rng, mdp.init_dist.view());
            let mut w = 1.0;
            for _ in 0..horizon {
                let a = sample_row(&mut rng, policy.row(s));
                visit[[s, a]] += w;
                let sp = sample_row(&mut rng, mdp.transition.slice(ndarray::s![s, a, ..]));
                w *= mdp.discount;
                s = sp;
            }
            let n = (i + 1) as f64;
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let delta = visit[[s, a]] - mean[[s, a]];
                    mean[[s, a]] += delta / n;
                    m2[[s, a]] += delta * (visit[[s, a]] - mean[[s, a]]);
                }
            }
        }
        let se = m2.mapv(|x| (x / (n_rollouts as f64 - 1.0) / n_rollouts as f64).sqrt());
        (mean, se)
    }

    #[test]
    fn occupancy_matches_rollout_oracle() {
        let mdp = TabularMdp::random(6, 3, 0.9, 42);
        let sol = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
        let occ = occupancy_measure(&mdp, &sol.policy).unwrap();
        let (mean, se) = rollout_occupancy_estimate(&mdp, &sol.policy, 100_000, 7);
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let diff = (occ.rho[[s, a]] - mean[[s, a]]).abs();
                assert!(
                    diff <= 3.0 * se[[s, a]] + 1e-6,
                    "rho({s},{a}) = {} vs MC {} ± {}",
                    occ.rho[[s, a]],
                    mean[[s, a]],
                    se[[s, a]]
                );
            }
        }
    }

    #[test]
    fn conditional_occupancy_single_state() {
        let mdp = single_state_mdp(1, 0.0, 0.5);
        let occ = conditional_occupancy(&mdp, &array![[1.0]], 0, 0).unwrap();
        assert_abs_diff_eq!(occ.rho[[0, 0]], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn conditional_occupancy_absorbing_goal() {
        // State 1 is absorbing under action 0; the policy at state 1 always
        // picks action 0, so a branch entering state 1 keeps all its mass on
        // (1, 0) after step 0.
        let mut transition = Array3::zeros((2, 2, 2));
        transition[[0, 0, 1]] = 1.0; // go to goal
        transition[[0, 1, 0]] = 1.0; // stay at start
        transition[[1, 0, 1]] = 1.0; // absorbing
        transition[[1, 1, 1]] = 1.0;
        let mdp = TabularMdp::new(
            transition,
            Array2::zeros((2, 2)),
            array![1.0, 0.0],
            0.8,
        )
        .unwrap();
        let policy = array![[0.5, 0.5], [1.0, 0.0]];
        let occ = conditional_occupancy(&mdp, &policy, 0, 0).unwrap();
        assert_abs_diff_eq!(occ.rho[[0, 0]], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(occ.rho[[1, 0]], 0.8 / 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(occ.rho[[1, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(occ.rho.sum(), 1.0 / 0.2, epsilon = 1e-9);
    }

    #[test]
    fn conditional_occupancy_matches_rollout_oracle() {
        use rand::{Rng, SeedableRng};
        let mdp = TabularMdp::random(5, 3, 0.85, 99);
        let sol = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
        let occ = conditional_occupancy(&mdp, &sol.policy, 2, 1).unwrap();
        // Same oracle as above but pinned to a branch point.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let horizon = horizon_for_tail(mdp.discount, 1e-9);
        let n_rollouts = 100_000usize;
        let mut mean = Array2::<f64>::zeros((5, 3));
        let mut m2 = Array2::<f64>::zeros((5, 3));
        let sample_row = |rng: &mut rand_chacha::ChaCha8Rng, row: ArrayView1<f64>| -> usize {
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last = i;
                    acc += p;
                    if r < acc {
                        return i;
                    }
                }
            }
            last
        };
        for i in 0..n_rollouts {
            let mut visit = Array2::<f64>::zeros((5, 3));
            let mut s = 2usize;
            let mut a = 1usize;
            let mut w = 1.0;
            for t in 0..horizon {
                if t > 0 {
                    a = sample_row(&mut rng, sol.policy.row(s));
                }
                visit[[s, a]] += w;
                s = sample_row(&mut rng, mdp.transition.slice(ndarray::s![s, a, ..]));
                w *= mdp.discount;
            }
            let n = (i + 1) as f64;
            for s in 0..5 {
                for a in 0..3 {
                    let delta = visit[[s, a]] - mean[[s, a]];
                    mean[[s, a]] += delta / n;
                    m2[[s, a]] += delta * (visit[[s, a]] - mean[[s, a]]);
                }
            }
        }
        for s in 0..5 {
            for a in 0..3 {
                let se = (m2[[s, a]] / (n_rollouts as f64 - 1.0) / n_rollouts as f64).sqrt();
                let diff = (occ.rho[[s, a]] - mean[[s, a]]).abs();
                assert!(diff <= 3.0 * se + 1e-6, "rho({s},{a}) off by {diff} (se {se})");
            }
        }
    }

    #[test]
    fn return_single_state_deterministic() {
        let mdp = single_state_mdp(1, 1.0, 0.9);
        let j = discounted_return(&mdp, &array![[1.0]]).unwrap();
        assert_abs_diff_eq!(j, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn return_pure_entropy_uniform_policy() {
        let mdp = single_state_mdp(2, 0.0, 0.9);
        let j = discounted_return(&mdp, &array![[0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(j, 2.0f64.ln() / 0.1, epsilon = 1e-9);
        let j_r = discounted_return_reward_only(&mdp, &array![[0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(j_r, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn return_equals_expected_value_for_soft_optimal_policy() {
        for seed in [1u64, 2, 3] {
            let mdp = TabularMdp::random(7, 3, 0.92, seed);
            let sol = soft_value_iteration(&mdp, 1e-12, 200_000).unwrap();
            let j = discounted_return(&mdp, &sol.policy).unwrap();
            let v_mu: f64 = (0..mdp.n_states).map(|s| mdp.init_dist[s] * sol.v[s]).sum();
            assert_abs_diff_eq!(j, v_mu, epsilon = 1e-8);
        }
    }

    #[test]
    fn occupancy_matches_truncated_power_series() {
        let mdp = TabularMdp::random(5, 2, 0.8, 77);
        let sol = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
        let occ = occupancy_measure(&mdp, &sol.policy).unwrap();
        // Brute-force power series: propagate the state distribution forward.
        let horizon = horizon_for_tail(mdp.discount, 1e-9);
        let mut series = Array2::<f64>::zeros((5, 2));
        let mut mu = mdp.init_dist.clone();
        let mut w = 1.0;
        for _ in 0..=horizon {
            for s in 0..5 {
                for a in 0..2 {
                    series[[s, a]] += w * mu[s] * sol.policy[[s, a]];
                }
            }
            let mut mu_next = Array1::<f64>::zeros(5);
            for s in 0..5 {
                for a in 0..2 {
                    let m = mu[s] * sol.policy[[s, a]];
                    for sp in 0..5 {
                        mu_next[sp] += m * mdp.transition[[s, a, sp]];
                    }
                }
            }
            mu = mu_next;
            w *= mdp.discount;
        }
        for s in 0..5 {
            for a in 0..2 {
                assert_abs_diff_eq!(occ.rho[[s, a]], series[[s, a]], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn mdp_validation_rejects_bad_rows() {
        let mut transition = Array3::zeros((2, 1, 2));
        transition[[0, 0, 0]] = 0.5; // sums to 0.5
        transition[[1, 0, 1]] = 1.0;
        let err = TabularMdp::new(
            transition,
            Array2::zeros((2, 1)),
            array![0.5, 0.5],
            0.9,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidMdp(_)));

        let mdp = TabularMdp::random(2, 2, 0.9, 0);
        assert!(TabularMdp::new(
            mdp.transition.clone(),
            mdp.reward.clone(),
            mdp.init_dist.clone(),
            1.0
        )
        .is_err());
    }

    #[test]
    fn json_round_trip_preserves_mdp() {
        let mdp = TabularMdp::random(4, 3, 0.7, 5);
        let text = mdp.to_json_string().unwrap();
        let back = TabularMdp::from_json_str(&text).unwrap();
        assert_eq!(back.n_states, 4);
        assert_eq!(back.n_actions, 3);
        assert_abs_diff_eq!(back.discount, 0.7, epsilon = 0.0);
        for s in 0..4 {
            for a in 0..3 {
                assert_abs_diff_eq!(back.reward[[s, a]], mdp.reward[[s, a]], epsilon = 0.0);
                for sp in 0..4 {
                    assert_abs_diff_eq!(
                        back.transition[[s, a, sp]],
                        mdp.transition[[s, a, sp]],
                        epsilon = 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn horizon_helpers() {
        assert_eq!(coarse_horizon(0.7), 3);
        let h = horizon_for_tail(0.7, 1e-9);
        assert!(0.7f64.powi(h as i32) <= 1e-9);
        assert!(0.7f64.powi(h as i32 - 1) > 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_probability_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.05f64..1.0, n).prop_map(|mut v| {
                let total: f64 = v.iter().sum();
                v.iter_mut().for_each(|p| *p /= total);
                v
            })
        }

        fn arb_mdp(n_states: usize, n_actions: usize) -> impl Strategy<Value = TabularMdp> {
            (
                proptest::collection::vec(arb_probability_row(n_states), n_states * n_actions),
                proptest::collection::vec(-1.0f64..1.0, n_states * n_actions),
                arb_probability_row(n_states),
                0.3f64..0.95,
            )
                .prop_map(move |(rows, rewards, init, discount)| {
                    let mut transition = Array3::zeros((n_states, n_actions, n_states));
                    for s in 0..n_states {
                        for a in 0..n_actions {
                            for sp in 0..n_states {
                                transition[[s, a, sp]] = rows[s * n_actions + a][sp];
                            }
                        }
                    }
                    let reward = Array2::from_shape_fn((n_states, n_actions), |(s, a)| {
                        rewards[s * n_actions + a]
                    });
                    TabularMdp::new(transition, reward, Array1::from(init), discount).unwrap()
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn occupancy_mass_and_nonnegativity(mdp in arb_mdp(4, 2)) {
                let sol = soft_value_iteration(&mdp, 1e-10, 200_000).unwrap();
                let occ = occupancy_measure(&mdp, &sol.policy).unwrap();
                prop_assert!((occ.d.sum() - 1.0).abs() < 1e-9);
                for x in occ.rho.iter() {
                    prop_assert!(*x >= -1e-12);
                }
            }

            #[test]
            fn value_bound_holds(mdp in arb_mdp(5, 3)) {
                let sol = soft_value_iteration(&mdp, 1e-10, 200_000).unwrap();
                let r_max = mdp.reward.iter().fold(0.0f64, |acc, r| acc.max(r.abs()))
                    + (mdp.n_actions as f64).ln();
                let bound = r_max / (1.0 - mdp.discount) + 1e-9;
                for v in sol.v.iter() {
                    prop_assert!(v.abs() <= bound);
                }
            }
        }
    }
}
