//! Trains one agent on the gridworld benchmark and prints the training
//! trace plus the final evaluation.
//!
//! ```bash
//! cargo run --example train_bm_irl -- [bm_irl|rm_irl|two_stage] [lambda2]
//! ```

use bayes_irl::estimation::{train, TrainConfig, Variant};
use bayes_irl::gridworld::{build_gridworld, generate_expert_dataset, GridworldSpec};
use bayes_irl::mdp::soft_value_iteration;

fn main() -> Result<(), bayes_irl::Error> {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(String::as_str) {
        None | Some("bm_irl") => Variant::BmIrl,
        Some("rm_irl") => Variant::RmIrl,
        Some("two_stage") => Variant::TwoStage,
        Some(other) => {
            eprintln!("unknown variant {other}");
            std::process::exit(2);
        }
    };
    let discount = 0.7;
    let lambda2: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let outer_iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let lambda1: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(discount);

    let spec = GridworldSpec::default();

    let mdp = build_gridworld(&spec, discount)?;
    let data = generate_expert_dataset(&mdp, 100, 50, 7)?;
    let cfg = TrainConfig {
        variant,
        lambda1,
        lambda2,
        eval: Some(bayes_irl::estimation::GridworldEvalConfig {
            spec: spec.clone(),
            rollouts: 100,
            rollout_steps: 50,
        }),
        record_every: 25,
        outer_iters,
        ..Default::default()
    };
    let record = train(&mdp, &data, &cfg)?;

    println!("{variant:?} on the {}x{} world, lambda2 = {lambda2}", spec.width, spec.height);
    println!(
        "{:>6} {:>14} {:>14} {:>12} {:>12} {:>14} {:>9} {:>10}",
        "iter", "log_post", "surrogate", "|g_reward|", "|g_dyn|", "dyn_loglik", "illegal", "gap"
    );
    for row in &record.rows {
        println!(
            "{:>6} {:>14.6} {:>14.6} {:>12.4e} {:>12.4e} {:>14.6} {:>9} {:>10.4}",
            row.iter,
            row.log_posterior,
            row.surrogate,
            row.reward_grad_norm,
            row.dyn_grad_norm,
            row.data_dyn_loglik,
            row.illegal_rate.map_or("-".to_string(), |x| format!("{x:.4}")),
            row.expert_gap,
        );
    }

    let expert = soft_value_iteration(&mdp, 1e-10, 100_000)?;
    let report = bayes_irl::analysis::performance_bound(
        &record.final_theta,
        &mdp,
        &expert.policy,
        &Default::default(),
    )?;
    println!(
        "\nfinal: gap {:.4} <= bound {:.4} (holds: {})",
        report.observed_gap, report.bound, report.holds
    );
    Ok(())
}
