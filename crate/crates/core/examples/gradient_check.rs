//! Compares the analytic meta-gradient (second order through the inner loop,
//! plus the distillation term) with central finite differences.

use caml::episodes::{make_task_distribution, DistributionConfig, Split};
use caml::meta::{episode_objective, init_state, ModelConfig, TrainConfig};
use caml::nets::Activation;
use caml::rng::{streams, RngStream};

fn main() -> caml::Result<()> {
    let dcfg = DistributionConfig {
        input_dim: 4,
        latent_dim: 2,
        classes_per_dataset: 6,
        ..Default::default()
    };
    let cfg = TrainConfig {
        n_way: 2,
        k_shot: 2,
        query_per_class: 3,
        inner_steps: 2,
        kg_nodes: 2,
        kg_dim: 6,
        lambda: 0.5,
        ..Default::default()
    };
    let model = ModelConfig {
        task_hidden: vec![6],
        task_activation: Activation::Tanh,
        embed_hidden: vec![6],
    };
    let dist = make_task_distribution(&dcfg, cfg.n_way, RngStream::new(cfg.seed, streams::DISTRIBUTION))?;
    let state = init_state(&cfg, &model, &dist)?;
    let ep = dist.sample_episode(Split::Train, 2, 2, 3, RngStream::new(5, 0))?;

    let analytic = episode_objective(&state, &cfg, &ep, None)?.grads;
    let h = 1e-5;
    let mut probe = state.clone();
    println!("{:<14} {:>12} {:>12}", "block", "|analytic|", "rel. error");
    for (name, offset, len) in state.params.layout() {
        let mut err = 0.0;
        let mut norm = 0.0;
        let base = state.params.flatten();
        let a = analytic.flatten();
        for i in offset..offset + len {
            let mut f = base.clone();
            f[i] += h;
            probe.params = state.params.unflatten(&f)?;
            let up = episode_objective(&probe, &cfg, &ep, None)?.objective;
            f[i] -= 2.0 * h;
            probe.params = state.params.unflatten(&f)?;
            let down = episode_objective(&probe, &cfg, &ep, None)?.objective;
            let fd = (up - down) / (2.0 * h);
            err += (a[i] - fd).powi(2);
            norm += fd * fd;
        }
        println!("{name:<14} {:>12.4e} {:>12.2e}", norm.sqrt(), (err / norm.max(1e-300)).sqrt());
    }
    Ok(())
}
