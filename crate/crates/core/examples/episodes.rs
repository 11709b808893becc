//! Samples episodes from each setting of the synthetic task distribution and
//! prints what they contain.

use caml::episodes::{make_task_distribution, DistributionConfig, Setting, Split};
use caml::rng::{streams, RngStream};

fn main() -> caml::Result<()> {
    for setting in [Setting::Adaptation, Setting::MultiDomain, Setting::DatasetGeneralization] {
        let cfg = DistributionConfig {
            setting,
            n_datasets: 3,
            n_domains: 3,
            holdout: 2,
            ..Default::default()
        };
        let dist = make_task_distribution(&cfg, 5, RngStream::new(0, streams::DISTRIBUTION))?;
        println!("{}:", setting.as_str());
        for (split, label) in [(Split::Train, "train"), (Split::Test, "test")] {
            let counts: Vec<usize> = dist.datasets.iter().map(|d| d.classes(split).len()).collect();
            println!("  {label} classes per dataset: {counts:?}");
        }
        for i in 0..3 {
            let ep = dist.sample_episode(Split::Test, 5, 1, 15, RngStream::new(1, i))?;
            let x0 = &ep.support[0].x;
            println!(
                "  episode {i}: mode {} domain {} dataset {}, {} support / {} query, first input [{:.2}, {:.2}, ..]",
                ep.mode_id,
                ep.domain_id,
                ep.dataset_id,
                ep.support.len(),
                ep.query.len(),
                x0[0],
                x0[1]
            );
        }
    }
    Ok(())
}
