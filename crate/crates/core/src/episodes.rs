//! Synthetic heterogeneous few-shot classification tasks.
//!
//! A [`TaskDistribution`] owns a bank of class-conditional generators per
//! dataset. Each dataset belongs to a *mode*: a fixed random rotation of the
//! input space, a mode-specific elementwise nonlinearity and a mode offset.
//! Only the first `latent_dim` rotated coordinates carry class information;
//! the rest are distractors, so which input directions matter differs by
//! mode. Domains add a per-domain noise scale, noise shape and shift.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Train and test classes come from the same datasets and domain.
    Adaptation,
    /// Every episode is drawn from one of several domains.
    MultiDomain,
    /// One dataset is held out entirely and used only for testing.
    DatasetGeneralization,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Adaptation => "adaptation",
            Setting::MultiDomain => "multi_domain",
            Setting::DatasetGeneralization => "dataset_generalization",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistributionConfig {
    pub setting: Setting,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub n_modes: usize,
    pub n_datasets: usize,
    pub n_domains: usize,
    pub classes_per_dataset: usize,
    pub train_frac: f64,
    /// Held-out dataset for [`Setting::DatasetGeneralization`].
    pub holdout: usize,
    pub class_separation: f64,
    pub within_class_std: f64,
    pub distractor_std: f64,
    pub mode_offset_std: f64,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Adaptation,
            input_dim: 16,
            latent_dim: 4,
            n_modes: 2,
            n_datasets: 2,
            n_domains: 1,
            classes_per_dataset: 20,
            train_frac: 0.7,
            holdout: 0,
            class_separation: 1.5,
            within_class_std: 0.4,
            distractor_std: 1.0,
            mode_offset_std: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warp {
    Identity,
    Squash,
    SignedPower,
    Bend,
}

impl Warp {
    fn for_mode(mode: usize) -> Self {
        match mode % 4 {
            0 => Warp::Identity,
            1 => Warp::Squash,
            2 => Warp::SignedPower,
            _ => Warp::Bend,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        match self {
            Warp::Identity => v,
            Warp::Squash => 2.0 * (v / 2.0).tanh(),
            Warp::SignedPower => v.signum() * v.abs().powf(0.75),
            Warp::Bend => v + 0.5 * v.sin(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mode {
    pub id: usize,
    rotation: DMatrix<f64>,
    offset: DVector<f64>,
    pub warp: Warp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseShape {
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug)]
pub struct DomainStyle {
    pub id: usize,
    pub noise_scale: f64,
    pub shape: NoiseShape,
    shift: DVector<f64>,
}

/// Class-conditional generator: a Gaussian (or uniform) blob in the latent
/// subspace, pushed through the dataset's mode warp.
#[derive(Clone, Debug)]
pub struct ClassGenerator {
    pub dataset_id: usize,
    pub class_id: usize,
    center: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct DatasetBank {
    pub id: usize,
    pub mode_id: usize,
    pub train_classes: Vec<ClassGenerator>,
    pub test_classes: Vec<ClassGenerator>,
    pub domains: Vec<DomainStyle>,
}

impl DatasetBank {
    pub fn classes(&self, split: Split) -> &[ClassGenerator] {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskDistribution {
    pub config: DistributionConfig,
    pub modes: Vec<Mode>,
    pub datasets: Vec<DatasetBank>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    pub n_way: usize,
    pub k_shot: usize,
    pub mode_id: usize,
    pub domain_id: usize,
    pub dataset_id: usize,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn random_rotation(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign-fix so the result is Haar distributed and independent of the QR routine.
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Builds a distribution whose generator parameters are fixed from here on.
pub fn make_task_distribution(
    config: &DistributionConfig,
    n_way: usize,
    stream: RngStream,
) -> Result<TaskDistribution> {
    validate(config, n_way)?;
    let mut rng = stream.rng();
    let p = config.input_dim;

    let modes: Vec<Mode> = (0..config.n_modes)
        .map(|id| Mode {
            id,
            rotation: random_rotation(&mut rng, p),
            offset: gaussian_vec(&mut rng, p, config.mode_offset_std),
            warp: Warp::for_mode(id),
        })
        .collect();

    let n_domains = match config.setting {
        Setting::MultiDomain => config.n_domains,
        _ => 1,
    };

    let mut datasets = Vec::with_capacity(config.n_datasets);
    for id in 0..config.n_datasets {
        let mut classes: Vec<ClassGenerator> = (0..config.classes_per_dataset)
            .map(|class_id| ClassGenerator {
                dataset_id: id,
                class_id,
                center: gaussian_vec(&mut rng, config.latent_dim, config.class_separation),
            })
            .collect();
        classes.shuffle(&mut rng);
        let held_out =
            config.setting == Setting::DatasetGeneralization && id == config.holdout;
        let n_train = if held_out {
            0
        } else {
            train_count(config)
        };
        let test_classes = classes.split_off(n_train);
        let domains = (0..n_domains)
            .map(|d| DomainStyle {
                id: d,
                noise_scale: 1.0 + 0.5 * d as f64,
                shape: if d % 2 == 0 {
                    NoiseShape::Gaussian
                } else {
                    NoiseShape::Uniform
                },
                shift: if d == 0 {
                    DVector::zeros(p)
                } else {
                    gaussian_vec(&mut rng, p, 0.5)
                },
            })
            .collect();
        datasets.push(DatasetBank {
            id,
            mode_id: id % config.n_modes,
            train_classes: classes,
            test_classes,
            domains,
        });
    }

    Ok(TaskDistribution {
        config: config.clone(),
        modes,
        datasets,
    })
}

fn train_count(config: &DistributionConfig) -> usize {
    (config.train_frac * config.classes_per_dataset as f64).round() as usize
}

fn validate(config: &DistributionConfig, n_way: usize) -> Result<()> {
    if config.n_modes == 0 {
        return Err(Error::config("distribution.n_modes", "must be at least 1"));
    }
    if config.n_datasets == 0 {
        return Err(Error::config("distribution.n_datasets", "must be at least 1"));
    }
    if config.latent_dim == 0 || config.latent_dim > config.input_dim {
        return Err(Error::config(
            "distribution.latent_dim",
            format!("must be in 1..={}", config.input_dim),
        ));
    }
    if !(0.0..=1.0).contains(&config.train_frac) {
        return Err(Error::config("distribution.train_frac", "must be in [0, 1]"));
    }
    if config.setting == Setting::MultiDomain && config.n_domains == 0 {
        return Err(Error::config("distribution.n_domains", "must be at least 1"));
    }
    if config.setting == Setting::DatasetGeneralization {
        if config.n_datasets < 2 {
            return Err(Error::config(
                "distribution.n_datasets",
                "dataset generalization needs at least 2 datasets",
            ));
        }
        if config.holdout >= config.n_datasets {
            return Err(Error::config(
                "distribution.holdout",
                format!("must be below n_datasets = {}", config.n_datasets),
            ));
        }
    }
    let n_train = train_count(config);
    let n_test = config.classes_per_dataset.saturating_sub(n_train);
    for id in 0..config.n_datasets {
        let held_out = config.setting == Setting::DatasetGeneralization && id == config.holdout;
        let (tr, te) = if held_out {
            (n_way, config.classes_per_dataset)
        } else {
            (n_train, n_test)
        };
        for (split, have) in [("train", tr), ("test", te)] {
            if have < n_way {
                return Err(Error::InsufficientClasses {
                    context: format!("dataset {id} {split} split"),
                    needed: n_way,
                    available: have,
                });
            }
        }
    }
    Ok(())
}

impl TaskDistribution {
    fn draw(
        &self,
        class: &ClassGenerator,
        domain: &DomainStyle,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let bank = &self.datasets[class.dataset_id];
        let mode = &self.modes[bank.mode_id];
        let p = cfg.input_dim;
        let mut u = DVector::zeros(p);
        for i in 0..p {
            let noise = match domain.shape {
                NoiseShape::Gaussian => {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                }
                // Unit-variance uniform.
                NoiseShape::Uniform => rng.random_range(-1.0..1.0) * 3f64.sqrt(),
            };
            u[i] = if i < cfg.latent_dim {
                class.center[i] + noise * cfg.within_class_std * domain.noise_scale
            } else {
                noise * cfg.distractor_std
            };
        }
        let rotated = &mode.rotation * u;
        (0..p)
            .map(|i| mode.warp.apply(rotated[i]) + mode.offset[i] + domain.shift[i])
            .collect()
    }

    fn eligible(&self, split: Split, n_way: usize) -> Vec<usize> {
        let generalization = self.config.setting == Setting::DatasetGeneralization;
        self.datasets
            .iter()
            .filter(|d| {
                let holdout = d.id == self.config.holdout;
                match (generalization, split) {
                    (true, Split::Train) if holdout => false,
                    (true, Split::Test) if !holdout => false,
                    _ => true,
                }
            })
            .filter(|d| d.classes(split).len() >= n_way)
            .map(|d| d.id)
            .collect()
    }

    /// Samples one `n_way`-way `k_shot`-shot episode with `q_per_class`
    /// query points per class. Class labels are the order in which classes
    /// were drawn, so they are a fresh permutation every episode.
    pub fn sample_episode(
        &self,
        split: Split,
        n_way: usize,
        k_shot: usize,
        q_per_class: usize,
        stream: RngStream,
    ) -> Result<Episode> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Invalid("n_way and k_shot must be positive".into()));
        }
        let eligible = self.eligible(split, n_way);
        if eligible.is_empty() {
            let available = self
                .datasets
                .iter()
                .map(|d| d.classes(split).len())
                .max()
                .unwrap_or(0);
            return Err(Error::InsufficientClasses {
                context: format!("{split:?} split"),
                needed: n_way,
                available,
            });
        }
        let mut rng = stream.rng();
        let dataset = &self.datasets[eligible[rng.random_range(0..eligible.len())]];
        let domain = &dataset.domains[rng.random_range(0..dataset.domains.len())];
        let pool = dataset.classes(split);
        let chosen = sample_indices(&mut rng, pool.len(), n_way).into_vec();

        let mut support = Vec::with_capacity(n_way * k_shot);
        let mut query = Vec::with_capacity(n_way * q_per_class);
        for (label, &ci) in chosen.iter().enumerate() {
            let class = &pool[ci];
            for _ in 0..k_shot {
                support.push(Sample {
                    x: self.draw(class, domain, &mut rng),
                    y: label,
                });
            }
            for _ in 0..q_per_class {
                query.push(Sample {
                    x: self.draw(class, domain, &mut rng),
                    y: label,
                });
            }
        }
        Ok(Episode {
            support,
            query,
            n_way,
            k_shot,
            mode_id: dataset.mode_id,
            domain_id: domain.id,
            dataset_id: dataset.id,
        })
    }
}

fn to_matrix(samples: &[Sample]) -> Mat {
    let p = samples.first().map_or(0, |s| s.x.len());
    Mat::from_fn(samples.len(), p, |r, c| samples[r].x[c])
}

impl Episode {
    pub fn support_x(&self) -> Mat {
        to_matrix(&self.support)
    }

    pub fn support_y(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.y).collect()
    }

    pub fn query_x(&self) -> Mat {
        to_matrix(&self.query)
    }

    pub fn query_y(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.y).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.x.len())
    }

    /// Checks the structural invariants of a k-shot N-way episode.
    pub fn validate(&self) -> Result<()> {
        if self.support.len() != self.n_way * self.k_shot {
            return Err(Error::Invalid(format!(
                "support has {} samples, expected {}",
                self.support.len(),
                self.n_way * self.k_shot
            )));
        }
        let mut counts = vec![0usize; self.n_way];
        for s in self.support.iter().chain(&self.query) {
            if s.y >= self.n_way {
                return Err(Error::Label {
                    label: s.y,
                    n_way: self.n_way,
                });
            }
        }
        for s in &self.support {
            counts[s.y] += 1;
        }
        if let Some(n) = counts.iter().position(|&c| c != self.k_shot) {
            return Err(Error::Invalid(format!(
                "class {n} has {} support samples, expected {}",
                counts[n], self.k_shot
            )));
        }
        Ok(())
    }
}

/// Writes episodes as line-delimited JSON records, one per line.
pub fn dump_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for ep in episodes {
        let line = serde_json::to_string(ep).expect("episode serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
