//! Trains MAML, the modulation-only baseline and CAML on a five-mode toy
//! distribution with shared seeds and prints a comparison table.
//!
//! ```text
//! cargo run --release --example compare_baselines -- [iterations] [test_episodes]
//! ```

use std::time::Instant;

use caml::episodes::{make_task_distribution, DistributionConfig};
use caml::eval::{compare_baselines, EvalConfig};
use caml::meta::{ModelConfig, TrainConfig};
use caml::rng::{streams, RngStream};

fn main() -> caml::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(3000);
    let n_episodes = args.next().and_then(|a| a.parse().ok()).unwrap_or(500);

    let dist_cfg = DistributionConfig {
        n_modes: 5,
        n_datasets: 5,
        distractor_std: 2.0,
        mode_offset_std: 0.5,
        ..Default::default()
    };
    let train = TrainConfig {
        iterations,
        kg_dim: 128,
        ..Default::default()
    };
    let model = ModelConfig::default();
    let eval = EvalConfig {
        n_episodes,
        ..Default::default()
    };
    let dist = make_task_distribution(&dist_cfg, train.n_way, RngStream::new(train.seed, streams::DISTRIBUTION))?;

    let t = Instant::now();
    let cmp = compare_baselines(&train, &model, &dist, &eval);
    print!("{}", cmp.to_table());
    println!("{:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
