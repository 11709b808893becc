//! Graph-spectral view of task encodings: trains briefly, encodes test tasks,
//! and reports how much of the accuracy signal sits in low graph frequencies.
//! Also runs the same diagnostic on a planted smooth signal and on noise.

use rand::Rng;

use caml::analysis::{encoding_quality_study, gft_and_concentration, graph_fourier_basis, knn_graph, AnalysisConfig, Laplacian};
use caml::episodes::{make_task_distribution, DistributionConfig};
use caml::meta::{train, ModelConfig, TrainConfig};
use caml::rng::{streams, RngStream};
use caml::tape::Mat;

fn main() -> caml::Result<()> {
    // Reference signals on points along a curve.
    let n = 120;
    let x = Mat::from_fn(n, 2, |i, j| {
        let t = i as f64 / n as f64 * std::f64::consts::PI;
        if j == 0 { t.cos() } else { t.sin() }
    });
    let basis = graph_fourier_basis(&knn_graph(&x, 4)?, Laplacian::Combinatorial)?;
    let smooth: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64).powi(2)).collect();
    let mut rng = RngStream::new(3, 0).rng();
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (name, s) in [("smooth", &smooth), ("noise", &noise)] {
        let r = gft_and_concentration(s, &basis)?;
        println!("{name:<8} c(0.1) = {:.3}  c(0.2) = {:.3}", r.concentration_at(0.1), r.concentration_at(0.2));
    }

    let cfg = TrainConfig {
        iterations: 200,
        ..Default::default()
    };
    let dist = make_task_distribution(&DistributionConfig::default(), cfg.n_way, RngStream::new(cfg.seed, streams::DISTRIBUTION))?;
    let (state, _) = train(&cfg, &ModelConfig::default(), &dist)?;
    let acfg = AnalysisConfig {
        n_tasks: 150,
        ..Default::default()
    };
    let study = encoding_quality_study(&state, &cfg, &dist, &acfg)?;
    let r = &study.report;
    println!(
        "task encodings: {} tasks, k = {}, c(0.1) = {:.3}, c(0.2) = {:.3}",
        study.records.len(),
        acfg.k,
        r.concentration_at(0.1),
        r.concentration_at(0.2)
    );
    Ok(())
}
