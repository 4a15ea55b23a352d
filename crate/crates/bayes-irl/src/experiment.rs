//! Reproducible experiment driver behind the `bayes-irl` binary: expert data
//! generation, training runs, λ sweeps, and bound certification.
//!
//! Every command is a pure function of (config, input files, seed); rerunning
//! with the same inputs produces byte-identical output files. Nothing here
//! writes wall-clock time or machine-specific paths.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    decompose_likelihood, performance_bound, t1_bound_value, witness_perturbation,
    witness_posterior_drop, witness_with_report, BoundReport, DecompositionReport,
};
use crate::error::{Error, Result};
use crate::estimation::{
    train, GradientBackend, GridworldEvalConfig, IterRow, MleSummary, RewardMode, RewardParam,
    SolveOptions, ThetaParams, TrainConfig, TrainingRecord, Variant,
};
use crate::gridworld::{
    build_gridworld, generate_expert_dataset, illegal_transition_rate, reward_recovery_error,
    Dataset, GridworldSpec, RecoveryReport,
};
use crate::mdp::{self, SoftSolution, TabularMdp};
use crate::sampling::policy_rollouts;

/// `[gridworld]` section: world geometry plus the experiment discount.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldSection {
    pub width: usize,
    pub height: usize,
    pub goal: (usize, usize),
    pub goal_logit: f64,
    pub discount: f64,
}

impl Default for GridworldSection {
    fn default() -> Self {
        GridworldSection { width: 5, height: 5, goal: (4, 4), goal_logit: 20.0, discount: 0.7 }
    }
}

/// `[train]` section: dataset size, variant, and optimization knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
    pub variant: Variant,
    pub gradient_backend: GradientBackend,
    pub reward_mode: RewardMode,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Grid of effective prior precisions swept by `sweep-lambda`.
    pub lambda_grid: Vec<f64>,
    pub reward_lr: f64,
    pub dynamics_lr: f64,
    pub dynamics_steps_per_outer: usize,
    pub rollout_batch: usize,
    pub rollout_steps: usize,
    pub outer_iters: usize,
    pub partial_inner_sweeps: Option<usize>,
    pub normalize_advantages: bool,
    pub laplace_smoothing: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Imagined rollouts drawn when evaluating a trained model.
    pub eval_rollouts: usize,
    pub eval_rollout_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_traj: 100,
            horizon: 50,
            seed: 7,
            variant: Variant::BmIrl,
            gradient_backend: GradientBackend::Exact,
            reward_mode: RewardMode::StateOnly,
            // The adversarial-to-likelihood ratio 0.01 keeps simultaneous
            // dynamics training well inside the stable regime for single
            // runs; the λ sweep re-wires (λ1, λ2) per grid point.
            lambda1: 0.1,
            lambda2: 10.0,
            lambda_grid: vec![0.001, 0.5, 10.0],
            reward_lr: 0.05,
            dynamics_lr: 0.05,
            dynamics_steps_per_outer: 1,
            rollout_batch: 256,
            rollout_steps: 40,
            outer_iters: 2000,
            partial_inner_sweeps: None,
            normalize_advantages: true,
            laplace_smoothing: 1.0,
            solver_tol: 1e-10,
            solver_max_iter: 100_000,
            eval_rollouts: 100,
            eval_rollout_steps: 50,
        }
    }
}

/// `[output]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub record_every: usize,
    pub snapshot_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/gridworld"), record_every: 20, snapshot_every: 500 }
    }
}

/// One experiment configuration, read from a TOML file with `[gridworld]`,
/// `[train]`, and `[output]` sections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gridworld: GridworldSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gridworld.discount > 0.0 && self.gridworld.discount < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in (0, 1), got {}",
                self.gridworld.discount
            )));
        }
        if self.train.eval_rollouts == 0 || self.train.eval_rollout_steps == 0 {
            return Err(Error::InvalidConfig("evaluation rollout counts must be >= 1".into()));
        }
        self.train_config().validate()
    }

    pub fn spec(&self) -> GridworldSpec {
        GridworldSpec {
            width: self.gridworld.width,
            height: self.gridworld.height,
            goal: self.gridworld.goal,
            goal_logit: self.gridworld.goal_logit,
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            reward_lr: t.reward_lr,
            dynamics_lr: t.dynamics_lr,
            dynamics_steps_per_outer: t.dynamics_steps_per_outer,
            rollout_batch: t.rollout_batch,
            rollout_steps: t.rollout_steps,
            outer_iters: t.outer_iters,
            seed: t.seed,
            variant: t.variant,
            gradient_backend: t.gradient_backend,
            reward_mode: t.reward_mode,
            partial_inner_sweeps: t.partial_inner_sweeps,
            normalize_advantages: t.normalize_advantages,
            laplace_smoothing: t.laplace_smoothing,
            record_every: self.output.record_every,
            snapshot_every: self.output.snapshot_every,
            solver: SolveOptions { tol: t.solver_tol, max_iter: t.solver_max_iter },
            eval: Some(GridworldEvalConfig {
                spec: self.spec(),
                rollouts: t.eval_rollouts,
                rollout_steps: t.eval_rollout_steps,
            }),
        }
    }

    /// Training configuration for one sweep point at effective prior
    /// precision `lambda`: `λ1 = γ` and `λ2 = λ` make the dynamics step
    /// direction proportional to the posterior gradient at `λ`.
    pub fn sweep_train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            variant: Variant::BmIrl,
            lambda1: self.gridworld.discount,
            lambda2: lambda,
            ..self.train_config()
        }
    }

    pub fn solver(&self) -> SolveOptions {
        SolveOptions { tol: self.train.solver_tol, max_iter: self.train.solver_max_iter }
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    policy: Vec<Vec<f64>>,
    v: Vec<f64>,
    q: Vec<Vec<f64>>,
    bellman_residual: f64,
}

fn table_to_rows(t: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..t.nrows()).map(|s| t.row(s).to_vec()).collect()
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_string(path, &text)
}

/// Manifest describing a generated expert dataset.
#[derive(Serialize, Deserialize)]
pub struct GenManifest {
    pub command: String,
    pub seed: u64,
    pub n_traj: usize,
    pub horizon: usize,
    pub n_transitions: f64,
    pub solver_residual: f64,
    pub discount: f64,
}

/// Writes `mdp.json`, `expert_policy.json`, `dataset.jsonl`, and
/// `manifest.json` into the output directory.
pub fn cmd_gen_expert(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out)?;
    let spec = cfg.spec();
    let mdp = build_gridworld(&spec, cfg.gridworld.discount)?;
    let solver = cfg.solver();
    let sol = mdp::soft_value_iteration(&mdp, solver.tol, solver.max_iter)?;
    let data = generate_expert_dataset(&mdp, cfg.train.n_traj, cfg.train.horizon, cfg.train.seed)?;

    write_string(&out.join("mdp.json"), &(mdp.to_json_string()? + "\n"))?;
    write_json(
        &out.join("expert_policy.json"),
        &PolicyJson {
            policy: table_to_rows(&sol.policy),
            v: sol.v.to_vec(),
            q: table_to_rows(&sol.q),
            bellman_residual: sol.bellman_residual,
        },
    )?;
    data.write_jsonl_file(&out.join("dataset.jsonl"))?;
    write_json(
        &out.join("manifest.json"),
        &GenManifest {
            command: "gen-expert".into(),
            seed: cfg.train.seed,
            n_traj: cfg.train.n_traj,
            horizon: cfg.train.horizon,
            n_transitions: data.n_transitions(),
            solver_residual: sol.bellman_residual,
            discount: cfg.gridworld.discount,
        },
    )
}

fn load_inputs(dir: &Path) -> Result<(TabularMdp, Dataset)> {
    // Sweep points keep their checkpoints in a subdirectory of the run that
    // holds mdp.json and dataset.jsonl, so fall back to the parent.
    let base = if dir.join("mdp.json").is_file() {
        dir
    } else {
        dir.parent().filter(|p| p.join("mdp.json").is_file()).unwrap_or(dir)
    };
    let mdp = TabularMdp::from_json_str(&std::fs::read_to_string(base.join("mdp.json"))?)?;
    let data = Dataset::read_jsonl_file(&base.join("dataset.jsonl"), mdp.n_states, mdp.n_actions)?;
    Ok((mdp, data))
}

/// Reward logits reduced to a per-state vector for the recovery metric.
pub fn state_logits_of(theta: &ThetaParams) -> Array1<f64> {
    match &theta.reward {
        RewardParam::StateLogits(x) => x.clone(),
        RewardParam::Table(t) => {
            Array1::from_iter((0..t.nrows()).map(|s| t.row(s).sum() / t.ncols() as f64))
        }
    }
}

/// Evaluation summary of a trained model.
#[derive(Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Prior precision realized by the update direction (`γ·λ2/λ1`).
    pub lambda_effective: f64,
    /// Raw weighting ratio `λ2/λ1` (null when λ1 = 0).
    pub lambda_ratio: Option<f64>,
    pub illegal_rate: f64,
    pub recovery: RecoveryReport,
    pub bound: BoundReport,
    pub solver_residual: f64,
    pub data_dyn_loglik: f64,
    pub expert_gap: f64,
    pub phase1: Option<MleSummary>,
}

fn training_csv(rows: &[IterRow]) -> String {
    let mut out = String::from(
        "iter,log_posterior,surrogate,reward_grad_norm,dyn_grad_norm,data_dyn_loglik,illegal_rate,expert_gap\n",
    );
    for r in rows {
        let illegal = r.illegal_rate.map_or(String::new(), |x| x.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.log_posterior,
            r.surrogate,
            r.reward_grad_norm,
            r.dyn_grad_norm,
            r.data_dyn_loglik,
            illegal,
            r.expert_gap
        ));
    }
    out
}

fn evaluate_trained(
    cfg: &RunConfig,
    tc: &TrainConfig,
    mdp: &TabularMdp,
    record: &TrainingRecord,
) -> Result<EvalReport> {
    let spec = cfg.spec();
    let solver = cfg.solver();
    let expert = mdp::soft_value_iteration(mdp, solver.tol, solver.max_iter)?;
    let theta = &record.final_theta;
    let rollouts = policy_rollouts(
        &theta.transition(),
        &record.final_solution.policy,
        &mdp.init_dist,
        cfg.train.eval_rollouts,
        cfg.train.eval_rollout_steps,
        tc.seed ^ 0x5EED_u64,
    );
    let illegal = illegal_transition_rate(&spec, &rollouts)?;
    let recovery = reward_recovery_error(&mdp.reward, &state_logits_of(theta))?;
    let bound = performance_bound(theta, mdp, &expert.policy, &solver)?;
    let final_row = record.rows.last().expect("training always records a terminal row");
    Ok(EvalReport {
        variant: tc.variant.to_string(),
        lambda1: tc.lambda1,
        lambda2: tc.lambda2,
        lambda_effective: tc.effective_lambda(mdp.discount),
        lambda_ratio: if tc.lambda1 > 0.0 { Some(tc.lambda2 / tc.lambda1) } else { None },
        illegal_rate: illegal,
        recovery,
        bound,
        solver_residual: record.final_solution.bellman_residual,
        data_dyn_loglik: final_row.data_dyn_loglik,
        expert_gap: final_row.expert_gap,
        phase1: record.phase1.clone(),
    })
}

fn run_point(
    cfg: &RunConfig,
    tc: &TrainConfig,
    mdp: &TabularMdp,
    data: &Dataset,
    out: &Path,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out)?;
    let record = train(mdp, data, tc)?;
    write_string(&out.join("training.csv"), &training_csv(&record.rows))?;
    write_string(&out.join("theta.json"), &(record.final_theta.to_json_string()? + "\n"))?;
    if !record.snapshots.is_empty() {
        let snap_dir = out.join("snapshots");
        std::fs::create_dir_all(&snap_dir)?;
        for snap in &record.snapshots {
            write_string(
                &snap_dir.join(format!("iter_{:06}.json", snap.iter)),
                &(snap.theta.to_json_string()? + "\n"),
            )?;
        }
    }
    let eval = evaluate_trained(cfg, tc, mdp, &record)?;
    write_json(&out.join("eval.json"), &eval)?;
    Ok(eval)
}

/// Trains the configured variant on the dataset in the output directory and
/// writes `training.csv`, `theta.json`, snapshots, and `eval.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    let (mdp, data) = load_inputs(&out)?;
    let tc = cfg.train_config();
    run_point(cfg, &tc, &mdp, &data, &out)?;
    Ok(())
}

/// Runs the λ grid plus the two-stage baseline with shared seeds and writes
/// the comparison CSV behind the gridworld figure.
pub fn cmd_sweep_lambda(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    let (mdp, data) = load_inputs(&out)?;
    let mut csv = String::from(
        "lambda,illegal_rate,goal_argmax,tv_to_true_reward,data_dyn_loglik,expert_gap\n",
    );
    let mut failures: BTreeMap<String, String> = BTreeMap::new();
    for &lambda in &cfg.train.lambda_grid {
        let tc = cfg.sweep_train_config(lambda);
        let label = format!("{lambda}");
        match run_point(cfg, &tc, &mdp, &data, &out.join(format!("bm_lambda_{label}"))) {
            Ok(eval) => csv.push_str(&sweep_row(&label, &eval)),
            Err(err) => {
                failures.insert(format!("bm_lambda_{label}"), err.to_string());
            }
        }
    }
    let two_stage_cfg = TrainConfig { variant: Variant::TwoStage, ..cfg.train_config() };
    match run_point(cfg, &two_stage_cfg, &mdp, &data, &out.join("two_stage")) {
        Ok(eval) => csv.push_str(&sweep_row("two_stage", &eval)),
        Err(err) => {
            failures.insert("two_stage".into(), err.to_string());
        }
    }
    write_string(&out.join("sweep.csv"), &csv)?;
    if !failures.is_empty() {
        write_json(&out.join("failures.json"), &failures)?;
    }
    Ok(())
}

fn sweep_row(label: &str, eval: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        label,
        eval.illegal_rate,
        eval.recovery.goal_argmax_match,
        eval.recovery.tv_distance,
        eval.data_dyn_loglik,
        eval.expert_gap
    )
}

#[derive(Serialize, Deserialize)]
pub struct WitnessSummary {
    pub policy_distance: f64,
    pub q_distance: f64,
    pub v_distance: f64,
    pub log_posterior_base: f64,
    pub log_posterior_witness: f64,
    pub posterior_decreased: bool,
}

/// One certification document per checkpoint.
#[derive(Serialize, Deserialize)]
pub struct Certificate {
    pub checkpoint: String,
    pub decomposition: DecompositionReport,
    pub t1_bound: f64,
    pub t1_within_bound: bool,
    pub bound_report: BoundReport,
    pub witness: WitnessSummary,
}

/// Certifies every checkpoint in the run directory (`theta.json` plus any
/// `snapshots/*.json`), writing one JSON document each under `certificates/`.
pub fn cmd_certify(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    let (mdp, data) = load_inputs(&out)?;
    let solver = cfg.solver();
    let expert = mdp::soft_value_iteration(&mdp, solver.tol, solver.max_iter)?;

    let mut checkpoints: Vec<PathBuf> = vec![out.join("theta.json")];
    let snap_dir = out.join("snapshots");
    if snap_dir.is_dir() {
        let mut snaps: Vec<PathBuf> = std::fs::read_dir(&snap_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        snaps.sort();
        checkpoints.extend(snaps);
    }

    let cert_dir = out.join("certificates");
    std::fs::create_dir_all(&cert_dir)?;
    for path in checkpoints {
        let theta = ThetaParams::from_json_str(&std::fs::read_to_string(&path)?)?;
        let cert = certify_checkpoint(&theta, &mdp, &data, &expert, &solver, &path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        write_json(&cert_dir.join(format!("{stem}.json")), &cert)?;
    }
    Ok(())
}

fn certify_checkpoint(
    theta: &ThetaParams,
    mdp: &TabularMdp,
    data: &Dataset,
    expert: &SoftSolution,
    solver: &SolveOptions,
    path: &Path,
) -> Result<Certificate> {
    let decomposition = decompose_likelihood(theta, mdp, &expert.policy, solver)?;
    let t1_bound = t1_bound_value(
        decomposition.epsilon_kl,
        {
            let reward = theta.reward_table();
            reward.iter().fold(0.0f64, |acc, r| acc.max(r.abs()))
                + (theta.n_actions() as f64).ln()
        },
        mdp.discount,
    );
    let bound_report = performance_bound(theta, mdp, &expert.policy, solver)?;
    let delta = witness_perturbation(theta, data, 0.05)?;
    let (theta_prime, witness) = witness_with_report(theta, mdp.discount, &delta, solver)?;
    let (base, prime) = witness_posterior_drop(theta, &theta_prime, mdp.discount, data, solver)?;
    Ok(Certificate {
        checkpoint: path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
            .to_string(),
        t1_within_bound: decomposition.t1.abs() <= t1_bound + 1e-12,
        decomposition,
        t1_bound,
        bound_report,
        witness: WitnessSummary {
            policy_distance: witness.policy_distance,
            q_distance: witness.q_distance,
            v_distance: witness.v_distance,
            log_posterior_base: base,
            log_posterior_witness: prime,
            posterior_decreased: prime < base,
        },
    })
}
