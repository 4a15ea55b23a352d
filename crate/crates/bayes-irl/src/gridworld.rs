//! Deterministic gridworld benchmark: world construction, expert data
//! generation, and the evaluation metrics used to compare agents.
//!
//! The environment is a `width x height` grid with four moves; walking into a
//! wall leaves the agent in place. The reward is state-only,
//! `R(s) = log P̃(s)` with `P̃ = softmax` of target logits that put
//! `goal_logit` on the goal cell and 0 elsewhere.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, softmax, TabularMdp};
use crate::sampling::sample_categorical;

/// What happens on a move that would leave the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRule {
    #[default]
    StayInPlace,
}

/// The four moves, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// Geometry and reward target of the gridworld experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Goal cell as `(x, y)`; defaults to the upper-right corner.
    pub goal: (usize, usize),
    /// Logit placed on the goal cell of the target distribution. The default
    /// of 20 puts all but ~5e-8 of the target mass on the goal while keeping
    /// every log-probability reward finite.
    pub goal_logit: f64,
    pub boundary_rule: BoundaryRule,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            width: 5,
            height: 5,
            goal: (4, 4),
            goal_logit: 20.0,
            boundary_rule: BoundaryRule::StayInPlace,
        }
    }
}

impl GridworldSpec {
    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn n_actions(&self) -> usize {
        Action::ALL.len()
    }

    pub fn state_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, state: usize) -> (usize, usize) {
        (state % self.width, state / self.width)
    }

    pub fn goal_state(&self) -> usize {
        self.state_index(self.goal.0, self.goal.1)
    }

    /// Start cell: the lower-left corner.
    pub fn start_state(&self) -> usize {
        self.state_index(0, 0)
    }

    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidConfig(format!(
                "degenerate grid {}x{}; both sides must be >= 2",
                self.width, self.height
            )));
        }
        if self.goal.0 >= self.width || self.goal.1 >= self.height {
            return Err(Error::InvalidConfig(format!(
                "goal {:?} outside {}x{} grid",
                self.goal, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Successor of `state` under `action`: the neighboring cell, or the same
    /// cell when the move points off the grid.
    pub fn successor(&self, state: usize, action: Action) -> usize {
        let (x, y) = self.cell_of(state);
        let (dx, dy) = action.delta();
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            match self.boundary_rule {
                BoundaryRule::StayInPlace => state,
            }
        } else {
            self.state_index(nx as usize, ny as usize)
        }
    }

    /// Legal successor set of a cell: the in-grid 4-neighborhood plus the
    /// cell itself. A transition outside this set is an illegal (diagonal or
    /// teleport) move.
    pub fn legal_successors(&self, state: usize) -> Vec<usize> {
        let mut out = vec![state];
        for action in Action::ALL {
            let sp = self.successor(state, action);
            if !out.contains(&sp) {
                out.push(sp);
            }
        }
        out.sort_unstable();
        out
    }

    /// Target logits: `goal_logit` on the goal cell, 0 elsewhere.
    pub fn target_logits(&self) -> Array1<f64> {
        let mut logits = Array1::zeros(self.n_states());
        logits[self.goal_state()] = self.goal_logit;
        logits
    }

    /// Target distribution `P̃ = softmax(target_logits)`.
    pub fn target_distribution(&self) -> Array1<f64> {
        let logits = self.target_logits();
        softmax(logits.view())
    }
}

/// Builds the deterministic gridworld MDP: one-hot transition rows, state-only
/// reward `R(s) = log P̃(s)` replicated across actions, point-mass initial
/// distribution at the lower-left corner.
pub fn build_gridworld(spec: &GridworldSpec, discount: f64) -> Result<TabularMdp> {
    spec.validate()?;
    let n_states = spec.n_states();
    let n_actions = spec.n_actions();
    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for action in Action::ALL {
            transition[[s, action.index(), spec.successor(s, action)]] = 1.0;
        }
    }
    let target = spec.target_distribution();
    let mut reward = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let r = target[s].ln();
        for a in 0..n_actions {
            reward[[s, a]] = r;
        }
    }
    let mut init_dist = Array1::zeros(n_states);
    init_dist[spec.start_state()] = 1.0;
    TabularMdp::new(transition, reward, init_dist, discount)
}

/// One episode: `states` has length T+1, `actions` length T.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} states for {} actions", self.actions.len() + 1, self.actions.len()),
                got: format!("{} states", self.states.len()),
            });
        }
        if let Some(&s) = self.states.iter().find(|&&s| s >= n_states) {
            return Err(Error::IndexOutOfRange(format!("state {s} >= {n_states}")));
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::IndexOutOfRange(format!("action {a} >= {n_actions}")));
        }
        Ok(())
    }
}

/// Expert demonstrations plus their sufficient-statistic counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    /// `counts[[s, a, s']] = N(s, a, s')`.
    pub counts: Array3<f64>,
    /// `sa_counts[[s, a]] = N(s, a)`.
    pub sa_counts: Array2<f64>,
}

impl Dataset {
    pub fn from_trajectories(
        trajectories: Vec<Trajectory>,
        n_states: usize,
        n_actions: usize,
    ) -> Result<Self> {
        let mut counts = Array3::zeros((n_states, n_actions, n_states));
        let mut sa_counts = Array2::zeros((n_states, n_actions));
        for traj in &trajectories {
            traj.validate(n_states, n_actions)?;
            for t in 0..traj.len() {
                let (s, a, sp) = (traj.states[t], traj.actions[t], traj.states[t + 1]);
                counts[[s, a, sp]] += 1.0;
                sa_counts[[s, a]] += 1.0;
            }
        }
        Ok(Dataset { trajectories, counts, sa_counts })
    }

    pub fn n_transitions(&self) -> f64 {
        self.sa_counts.sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_transitions() == 0.0
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for traj in &self.trajectories {
            serde_json::to_writer(&mut out, traj)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn read_jsonl<R: BufRead>(reader: R, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut trajectories = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str::<Trajectory>(&line)?);
        }
        Self::from_trajectories(trajectories, n_states, n_actions)
    }

    pub fn read_jsonl_file(path: &Path, n_states: usize, n_actions: usize) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file), n_states, n_actions)
    }
}

/// Samples `n_traj` expert trajectories of length `horizon` from the
/// soft-optimal policy in the true dynamics; reproducible given `seed`.
pub fn generate_expert_dataset(
    mdp: &TabularMdp,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    use rand::SeedableRng;
    let sol = mdp::soft_value_iteration(mdp, 1e-10, 100_000)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut s = sample_categorical(&mut rng, mdp.init_dist.view());
        states.push(s);
        for _ in 0..horizon {
            let a = sample_categorical(&mut rng, sol.policy.row(s));
            let sp = sample_categorical(&mut rng, mdp.transition.slice(ndarray::s![s, a, ..]));
            actions.push(a);
            states.push(sp);
            s = sp;
        }
        trajectories.push(Trajectory { states, actions });
    }
    Dataset::from_trajectories(trajectories, mdp.n_states, mdp.n_actions)
}

/// Fraction of consecutive state pairs whose successor lies outside the legal
/// successor set of the predecessor. Errors when the rollouts contain no
/// transitions at all.
pub fn illegal_transition_rate(spec: &GridworldSpec, rollouts: &[Trajectory]) -> Result<f64> {
    spec.validate()?;
    let n_states = spec.n_states();
    let legal: Vec<Vec<usize>> = (0..n_states).map(|s| spec.legal_successors(s)).collect();
    let mut total = 0usize;
    let mut illegal = 0usize;
    for traj in rollouts {
        for window in traj.states.windows(2) {
            let (s, sp) = (window[0], window[1]);
            if s >= n_states || sp >= n_states {
                return Err(Error::IndexOutOfRange(format!(
                    "state {} outside the {n_states}-state grid",
                    s.max(sp)
                )));
            }
            total += 1;
            if legal[s].binary_search(&sp).is_err() {
                illegal += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyRollouts);
    }
    Ok(illegal as f64 / total as f64)
}

/// How well an estimated state-reward recovered the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Whether the argmax of the estimated state reward is the goal cell
    /// (the argmax of the true target distribution).
    pub goal_argmax_match: bool,
    /// Total-variation distance between the true target distribution and
    /// `softmax(est_logits)`.
    pub tv_distance: f64,
}

/// Compares estimated reward logits against the true state-only reward table.
pub fn reward_recovery_error(
    true_reward: &Array2<f64>,
    est_logits: &Array1<f64>,
) -> Result<RecoveryReport> {
    let n_states = true_reward.nrows();
    if est_logits.len() != n_states {
        return Err(Error::ShapeMismatch {
            expected: format!("est_logits [{n_states}]"),
            got: format!("[{}]", est_logits.len()),
        });
    }
    // State reward averaged over actions; for state-only rewards the rows are
    // constant and the mean is exact.
    let state_reward = Array1::from_iter(
        (0..n_states).map(|s| true_reward.row(s).sum() / true_reward.ncols() as f64),
    );
    let p_true = softmax(state_reward.view());
    let p_est = softmax(est_logits.view());
    let goal = argmax(&p_true);
    let tv_distance = 0.5
        * p_true
            .iter()
            .zip(p_est.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok(RecoveryReport { goal_argmax_match: argmax(&p_est) == goal, tv_distance })
}

fn argmax(xs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn target_mass_concentrates_on_goal() {
        let spec = GridworldSpec::default();
        let target = spec.target_distribution();
        assert!(target[spec.goal_state()] >= 1.0 - 25.0 * (-20.0f64).exp());
    }

    #[test]
    fn boundary_moves_stay_in_place() {
        let spec = GridworldSpec { width: 2, height: 2, goal: (1, 1), ..Default::default() };
        // top row, moving up
        let top_left = spec.state_index(0, 1);
        assert_eq!(spec.successor(top_left, Action::Up), top_left);
        assert_eq!(spec.successor(top_left, Action::Left), top_left);
        assert_eq!(spec.successor(top_left, Action::Down), spec.state_index(0, 0));
    }

    #[test]
    fn transitions_are_one_hot_and_legal() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        for s in 0..mdp.n_states {
            let legal = spec.legal_successors(s);
            for a in 0..mdp.n_actions {
                let row = mdp.transition.slice(ndarray::s![s, a, ..]);
                let ones = row.iter().filter(|&&p| p == 1.0).count();
                let zeros = row.iter().filter(|&&p| p == 0.0).count();
                assert_eq!(ones, 1);
                assert_eq!(zeros, mdp.n_states - 1);
                let sp = row.iter().position(|&p| p == 1.0).unwrap();
                assert!(legal.binary_search(&sp).is_ok());
            }
        }
        assert_abs_diff_eq!(mdp.init_dist[spec.start_state()], 1.0, epsilon = 0.0);
    }

    #[test]
    fn degenerate_grid_rejected() {
        let spec = GridworldSpec { width: 1, height: 5, goal: (0, 4), ..Default::default() };
        assert!(build_gridworld(&spec, 0.7).is_err());
    }

    #[test]
    fn expert_dataset_has_expected_size() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let data = generate_expert_dataset(&mdp, 100, 50, 1).unwrap();
        assert_eq!(data.trajectories.len(), 100);
        assert_abs_diff_eq!(data.n_transitions(), 5000.0, epsilon = 0.0);
        assert_abs_diff_eq!(data.counts.sum(), 5000.0, epsilon = 0.0);
    }

    #[test]
    fn empty_dataset_from_zero_trajectories() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let data = generate_expert_dataset(&mdp, 0, 50, 1).unwrap();
        assert!(data.is_empty());
        assert_eq!(data.counts.sum(), 0.0);
    }

    #[test]
    fn expert_dataset_is_deterministic() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let a = generate_expert_dataset(&mdp, 20, 30, 9).unwrap();
        let b = generate_expert_dataset(&mdp, 20, 30, 9).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn expert_rollouts_are_legal() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let data = generate_expert_dataset(&mdp, 50, 50, 3).unwrap();
        let rate = illegal_transition_rate(&spec, &data.trajectories).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn diagonal_trajectory_is_fully_illegal() {
        let spec = GridworldSpec::default();
        let states: Vec<usize> = (0..5).map(|i| spec.state_index(i, i)).collect();
        let traj = Trajectory { states, actions: vec![0; 4] };
        let rate = illegal_transition_rate(&spec, &[traj]).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn empty_rollouts_error() {
        let spec = GridworldSpec::default();
        assert!(matches!(
            illegal_transition_rate(&spec, &[]),
            Err(Error::EmptyRollouts)
        ));
    }

    #[test]
    fn uniform_dynamics_illegal_rate_matches_enumeration() {
        // Under uniform successor rows every step lands uniformly at random,
        // so the expected illegal rate over a horizon-T rollout from the
        // start cell is [f(start) + (T-1)·mean_s f(s)] / T with
        // f(s) = 1 - |legal(s)|/n.
        let spec = GridworldSpec::default();
        let n = spec.n_states() as f64;
        let mdp_true = build_gridworld(&spec, 0.7).unwrap();
        let uniform = Array3::from_elem((spec.n_states(), 4, spec.n_states()), 1.0 / n);
        let mdp = TabularMdp::new(
            uniform,
            mdp_true.reward.clone(),
            mdp_true.init_dist.clone(),
            0.7,
        )
        .unwrap();
        let data = generate_expert_dataset(&mdp, 100, 50, 17).unwrap();
        let rate = illegal_transition_rate(&spec, &data.trajectories).unwrap();

        let f = |s: usize| 1.0 - spec.legal_successors(s).len() as f64 / n;
        let f_mean: f64 = (0..spec.n_states()).map(f).sum::<f64>() / n;
        let expected = (f(spec.start_state()) + 49.0 * f_mean) / 50.0;
        // 5000 independent Bernoulli steps
        let se = (expected * (1.0 - expected) / 5000.0).sqrt();
        assert!(
            (rate - expected).abs() <= 3.0 * se,
            "rate {rate} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn recovery_report_exact_logits() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let report = reward_recovery_error(&mdp.reward, &spec.target_logits()).unwrap();
        assert!(report.goal_argmax_match);
        assert_abs_diff_eq!(report.tv_distance, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn recovery_report_uniform_estimate() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let report =
            reward_recovery_error(&mdp.reward, &Array1::zeros(spec.n_states())).unwrap();
        // Direct enumeration of TV(P̃, uniform).
        let p = spec.target_distribution();
        let n = spec.n_states() as f64;
        let tv = 0.5 * p.iter().map(|x| (x - 1.0 / n).abs()).sum::<f64>();
        assert_abs_diff_eq!(report.tv_distance, tv, epsilon = 1e-12);
        assert!(!report.goal_argmax_match);
    }

    #[test]
    fn recovery_report_shape_mismatch() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        assert!(reward_recovery_error(&mdp.reward, &Array1::zeros(7)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec, 0.7).unwrap();
        let data = generate_expert_dataset(&mdp, 5, 10, 2).unwrap();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(&buf[..], mdp.n_states, mdp.n_actions).unwrap();
        assert_eq!(back.trajectories, data.trajectories);
        assert_eq!(back.sa_counts, data.sa_counts);
    }
}
