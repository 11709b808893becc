//! Meta-trains CAML on a small distribution, saves a checkpoint, reloads it
//! and evaluates on held-out classes.

use caml::episodes::{make_task_distribution, DistributionConfig, Split};
use caml::eval::{evaluate, EvalConfig};
use caml::meta::{train, ModelConfig, TrainConfig};
use caml::rng::{streams, RngStream};

fn main() -> caml::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let cfg = TrainConfig {
        iterations,
        ..Default::default()
    };
    let model = ModelConfig::default();
    let dist = make_task_distribution(&DistributionConfig::default(), cfg.n_way, RngStream::new(cfg.seed, streams::DISTRIBUTION))?;

    let (state, log) = train(&cfg, &model, &dist)?;
    let smooth = log.smoothed_accuracy(50);
    for (i, acc) in smooth.iter().enumerate().step_by((smooth.len() / 10).max(1)) {
        println!("iteration {:>5}  query accuracy {:.3}", i + 1, acc);
    }

    let dir = std::env::temp_dir().join("caml_train_toy");
    std::fs::create_dir_all(&dir).map_err(|e| caml::Error::io(&dir, e))?;
    let path = dir.join("final.bin");
    caml::checkpoint::save(&state, &path)?;
    let loaded = caml::checkpoint::load(&path, &state.arch)?;
    assert_eq!(loaded.digest(), state.digest());

    let report = evaluate(&loaded, &cfg, &dist, Split::Test, &EvalConfig { n_episodes: 300, ..Default::default() })?;
    println!("test accuracy {} % over {} episodes ({})", report.summary(), report.n_episodes, path.display());
    Ok(())
}
