//! Joint reward + dynamics estimation: the posterior objective, exact
//! gradients through the entropy-regularized planner, the contrastive
//! surrogate objective, and the training loops.

mod objectives;
mod theta;
mod training;

pub use objectives::{
    energy, exact_policy_log_grad, log_posterior, log_posterior_with, posterior_gradient,
    prior_gradient, solve_policy, surrogate_gradient, surrogate_objective,
    surrogate_objective_with, DataWeights, PosteriorEval, SolveOptions, LOG_CLAMP,
};
pub use theta::{GradientVector, RewardParam, ThetaParams};
pub use training::{
    bm_irl_train, mle_dynamics_logits, mle_summary, rm_irl_train, sampled_reward_gradient,
    train, two_stage_train, GradientBackend, GridworldEvalConfig, IterRow, MleSummary, RewardMode,
    Snapshot, TrainConfig, TrainingRecord, Variant,
};
