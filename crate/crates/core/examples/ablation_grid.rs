//! Sweeps the moving-average coefficient and the distillation weight.
//!
//! ```text
//! cargo run --release --example ablation_grid -- [iterations]
//! ```

use caml::episodes::{make_task_distribution, DistributionConfig};
use caml::eval::{run_ablation_grid, EvalConfig, DEFAULT_ALPHAS, DEFAULT_LAMBDAS};
use caml::meta::{ModelConfig, TrainConfig};
use caml::rng::{streams, RngStream};

fn main() -> caml::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let train = TrainConfig {
        iterations,
        ..Default::default()
    };
    let dcfg = DistributionConfig {
        n_modes: 3,
        distractor_std: 2.0,
        ..Default::default()
    };
    let dist = make_task_distribution(&dcfg, train.n_way, RngStream::new(train.seed, streams::DISTRIBUTION))?;
    let eval = EvalConfig {
        n_episodes: 200,
        ..Default::default()
    };
    let grid = run_ablation_grid(&train, &ModelConfig::default(), &dist, &eval, &DEFAULT_ALPHAS, &DEFAULT_LAMBDAS);
    print!("{}", grid.to_table());
    Ok(())
}
