//! Learnable parameters: reward logits, dynamics logits, and the prior
//! precision, plus the matching gradient container.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{log_sum_exp, softmax, TabularMdp};

/// Logits written to disk replace log-zero (`-inf`) entries with this finite
/// sentinel; `exp` underflows to exactly zero either way.
const MIN_STORED_LOGIT: f64 = -1.0e15;

/// Reward parameterization. The state-only mode is
/// `R(s) = log softmax(logits)[s]`, replicated across actions; the table mode
/// is a raw `[n_states x n_actions]` reward, needed e.g. to represent the
/// reward side of the reward/dynamics exchange that leaves the policy
/// invariant. Gradients share the parameter shape, so this type doubles as
/// the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardParam {
    StateLogits(Array1<f64>),
    Table(Array2<f64>),
}

impl RewardParam {
    pub fn zeros_like(&self) -> RewardParam {
        match self {
            RewardParam::StateLogits(x) => RewardParam::StateLogits(Array1::zeros(x.len())),
            RewardParam::Table(x) => RewardParam::Table(Array2::zeros(x.dim())),
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            RewardParam::StateLogits(x) => x.len(),
            RewardParam::Table(x) => x.nrows(),
        }
    }

    /// Realized reward table `R[[s, a]]`.
    pub fn reward_table(&self, n_actions: usize) -> Array2<f64> {
        match self {
            RewardParam::StateLogits(logits) => {
                let lse = log_sum_exp(logits.view());
                let mut table = Array2::zeros((logits.len(), n_actions));
                for s in 0..logits.len() {
                    let r = logits[s] - lse;
                    for a in 0..n_actions {
                        table[[s, a]] = r;
                    }
                }
                table
            }
            RewardParam::Table(table) => {
                assert_eq!(table.ncols(), n_actions, "reward table action count");
                table.clone()
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            RewardParam::StateLogits(x) => x.iter().map(|v| v * v).sum(),
            RewardParam::Table(x) => x.iter().map(|v| v * v).sum(),
        }
    }

    pub fn dot(&self, other: &RewardParam) -> f64 {
        match (self, other) {
            (RewardParam::StateLogits(a), RewardParam::StateLogits(b)) => {
                a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
            }
            (RewardParam::Table(a), RewardParam::Table(b)) => {
                a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
            }
            _ => panic!("reward parameter modes differ"),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        match self {
            RewardParam::StateLogits(x) => x.mapv_inplace(|v| v * alpha),
            RewardParam::Table(x) => x.mapv_inplace(|v| v * alpha),
        }
    }

    /// `self += alpha * other`; both sides must share the mode and shape.
    pub fn scaled_add(&mut self, alpha: f64, other: &RewardParam) {
        match (self, other) {
            (RewardParam::StateLogits(a), RewardParam::StateLogits(b)) => {
                a.zip_mut_with(b, |x, y| *x += alpha * y);
            }
            (RewardParam::Table(a), RewardParam::Table(b)) => {
                a.zip_mut_with(b, |x, y| *x += alpha * y);
            }
            _ => panic!("reward parameter modes differ"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            RewardParam::StateLogits(x) => x.iter().all(|v| v.is_finite()),
            RewardParam::Table(x) => x.iter().all(|v| v.is_finite()),
        }
    }
}

/// Concatenated learnable parameters θ = (reward, dynamics logits) plus the
/// prior precision λ. The induced internal dynamics is
/// `P̂(s'|s, a) = softmax over s' of dynamics_logits[[s, a, ·]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub reward: RewardParam,
    pub dynamics_logits: Array3<f64>,
    /// Prior precision λ ≥ 0 weighting the dynamics data-likelihood term.
    pub lambda: f64,
}

impl ThetaParams {
    pub fn new(reward: RewardParam, dynamics_logits: Array3<f64>, lambda: f64) -> Result<Self> {
        let (ns, na, nn) = dynamics_logits.dim();
        if nn != ns {
            return Err(Error::ShapeMismatch {
                expected: format!("dynamics logits [{ns} x {na} x {ns}]"),
                got: format!("[{ns} x {na} x {nn}]"),
            });
        }
        if reward.n_states() != ns {
            return Err(Error::ShapeMismatch {
                expected: format!("reward over {ns} states"),
                got: format!("{} states", reward.n_states()),
            });
        }
        if let RewardParam::Table(t) = &reward {
            if t.ncols() != na {
                return Err(Error::ShapeMismatch {
                    expected: format!("reward table [{ns} x {na}]"),
                    got: format!("[{} x {}]", t.nrows(), t.ncols()),
                });
            }
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(ThetaParams { reward, dynamics_logits, lambda })
    }

    pub fn n_states(&self) -> usize {
        self.dynamics_logits.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.dynamics_logits.dim().1
    }

    /// Induced transition tensor with softmax rows.
    pub fn transition(&self) -> Array3<f64> {
        let (ns, na, _) = self.dynamics_logits.dim();
        let mut out = Array3::zeros((ns, na, ns));
        for s in 0..ns {
            for a in 0..na {
                let row = softmax(self.dynamics_logits.slice(ndarray::s![s, a, ..]));
                for sp in 0..ns {
                    out[[s, a, sp]] = row[sp];
                }
            }
        }
        out
    }

    pub fn reward_table(&self) -> Array2<f64> {
        self.reward.reward_table(self.n_actions())
    }

    /// The learner's MDP `(P̂_θ, R_θ, µ, γ)`.
    pub fn induced_mdp(&self, discount: f64, init_dist: Array1<f64>) -> Result<TabularMdp> {
        TabularMdp::new(self.transition(), self.reward_table(), init_dist, discount)
    }

    /// Ground-truth parameters for `mdp`: raw reward table and `ln P` dynamics
    /// logits (log-zero entries for impossible transitions).
    pub fn from_mdp_exact(mdp: &TabularMdp, lambda: f64) -> Self {
        let logits = mdp.transition.mapv(|p| p.ln());
        ThetaParams {
            reward: RewardParam::Table(mdp.reward.clone()),
            dynamics_logits: logits,
            lambda,
        }
    }

    /// Random finite parameters for tests and property sweeps.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        scale: f64,
        lambda: f64,
        state_only_reward: bool,
        seed: u64,
    ) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let reward = if state_only_reward {
            RewardParam::StateLogits(Array1::from_shape_fn(n_states, |_| {
                rng.gen_range(-scale..scale)
            }))
        } else {
            RewardParam::Table(Array2::from_shape_fn((n_states, n_actions), |_| {
                rng.gen_range(-scale..scale)
            }))
        };
        let dynamics_logits = Array3::from_shape_fn((n_states, n_actions, n_states), |_| {
            rng.gen_range(-scale..scale)
        });
        ThetaParams { reward, dynamics_logits, lambda }
    }

    pub fn is_finite(&self) -> bool {
        // Dynamics logits may legitimately contain -inf (log-zero); NaN or
        // +inf anywhere marks a diverged state.
        self.reward.is_finite()
            && self.dynamics_logits.iter().all(|v| !v.is_nan() && *v != f64::INFINITY)
            && self.lambda.is_finite()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ThetaJson::from(self))?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ThetaJson = serde_json::from_str(text)?;
        doc.into_theta()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RewardJson {
    StateLogits(Vec<f64>),
    Table(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct ThetaJson {
    lambda: f64,
    reward: RewardJson,
    dynamics_logits: Vec<Vec<Vec<f64>>>,
}

impl From<&ThetaParams> for ThetaJson {
    fn from(theta: &ThetaParams) -> Self {
        let (ns, na, _) = theta.dynamics_logits.dim();
        let store = |x: f64| x.max(MIN_STORED_LOGIT);
        let reward = match &theta.reward {
            RewardParam::StateLogits(x) => RewardJson::StateLogits(x.to_vec()),
            RewardParam::Table(t) => RewardJson::Table(
                (0..t.nrows()).map(|s| t.row(s).to_vec()).collect(),
            ),
        };
        let dynamics_logits = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| (0..ns).map(|sp| store(theta.dynamics_logits[[s, a, sp]])).collect())
                    .collect()
            })
            .collect();
        ThetaJson { lambda: theta.lambda, reward, dynamics_logits }
    }
}

impl ThetaJson {
    fn into_theta(self) -> Result<ThetaParams> {
        let ns = self.dynamics_logits.len();
        if ns == 0 {
            return Err(Error::InvalidConfig("dynamics_logits is empty".into()));
        }
        let na = self.dynamics_logits[0].len();
        let mut logits = Array3::zeros((ns, na, ns));
        for (s, per_action) in self.dynamics_logits.iter().enumerate() {
            if per_action.len() != na {
                return Err(Error::InvalidConfig(format!(
                    "dynamics_logits[{s}] has inconsistent action count"
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::InvalidConfig(format!(
                        "dynamics_logits[{s}][{a}] has length {} (expected {ns})",
                        row.len()
                    )));
                }
                for (sp, &x) in row.iter().enumerate() {
                    logits[[s, a, sp]] = x;
                }
            }
        }
        let reward = match self.reward {
            RewardJson::StateLogits(x) => RewardParam::StateLogits(Array1::from(x)),
            RewardJson::Table(rows) => {
                let ncols = rows.first().map_or(0, |r| r.len());
                if rows.len() != ns || rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::InvalidConfig("reward table shape mismatch".into()));
                }
                RewardParam::Table(Array2::from_shape_fn((ns, ncols), |(s, a)| rows[s][a]))
            }
        };
        ThetaParams::new(reward, logits, self.lambda)
    }
}

/// Gradient of an objective with respect to θ; shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct GradientVector {
    pub d_reward: RewardParam,
    pub d_dynamics: Array3<f64>,
}

impl GradientVector {
    pub fn zeros_like(theta: &ThetaParams) -> Self {
        GradientVector {
            d_reward: theta.reward.zeros_like(),
            d_dynamics: Array3::zeros(theta.dynamics_logits.dim()),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.d_reward.norm_sq() + self.d_dynamics.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.d_reward.dot(&other.d_reward)
            + self
                .d_dynamics
                .iter()
                .zip(other.d_dynamics.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &GradientVector) {
        self.d_reward.scaled_add(alpha, &other.d_reward);
        self.d_dynamics.zip_mut_with(&other.d_dynamics, |x, y| *x += alpha * y);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.d_reward.scale(alpha);
        self.d_dynamics.mapv_inplace(|v| v * alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.d_reward.is_finite() && self.d_dynamics.iter().all(|v| v.is_finite())
    }

    /// Relative sup-norm distance to `other`, scaled by the largest
    /// coordinate of `other` (with a small absolute floor).
    pub fn rel_sup_distance(&self, other: &GradientVector) -> f64 {
        let mut diff = 0.0f64;
        let mut scale = 1e-12f64;
        let fold = |diff: &mut f64, scale: &mut f64, a: f64, b: f64| {
            *diff = diff.max((a - b).abs());
            *scale = scale.max(b.abs());
        };
        match (&self.d_reward, &other.d_reward) {
            (RewardParam::StateLogits(a), RewardParam::StateLogits(b)) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    fold(&mut diff, &mut scale, *x, *y);
                }
            }
            (RewardParam::Table(a), RewardParam::Table(b)) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    fold(&mut diff, &mut scale, *x, *y);
                }
            }
            _ => panic!("reward parameter modes differ"),
        }
        for (x, y) in self.d_dynamics.iter().zip(other.d_dynamics.iter()) {
            fold(&mut diff, &mut scale, *x, *y);
        }
        diff / scale
    }
}
