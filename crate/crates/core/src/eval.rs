//! Test-time adaptation, evaluation reports, baseline comparison and the
//! (α, λ) ablation grid.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{compute_prototypes, knowledge_enhanced_encoding, task_encoding};
use crate::episodes::{Episode, Setting, Split, TaskDistribution};
use crate::error::{Error, Result};
use crate::graphs::{build_prototype_graph, KG_EDGE, NMP_WEIGHT, TASK_EDGE};
use crate::meta::{train, LearnerState, ModelConfig, TrainConfig};
use crate::modulation::{inner_adapt, modulate, modulation_gates, InnerLoop};
use crate::nets::accuracy;
use crate::rng::{streams, RngStream};
use crate::tape::Tape;

/// Evaluation settings shared by every protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Seed of the test episode stream. Kept separate from the training seed
    /// so every variant in a comparison sees the same test tasks.
    pub seed: u64,
    pub query_per_class: usize,
    /// Also report the variant that infuses the knowledge graph into the
    /// test-time encoding.
    pub kg_at_test: bool,
    pub workers: usize,
    /// Settings to evaluate; empty means the configured distribution's own.
    pub protocols: Vec<Setting>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 1000,
            seed: 12345,
            query_per_class: 15,
            kg_at_test: false,
            workers: 1,
            protocols: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes < 2 {
            return Err(Error::config("eval.n_episodes", "must be at least 2"));
        }
        if self.query_per_class < 1 {
            return Err(Error::config("eval.query_per_class", "must be at least 1"));
        }
        if self.workers < 1 {
            return Err(Error::config("eval.workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// Result of adapting to one test episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScore {
    pub accuracy: f64,
    /// Task encoding that produced the gates (ẑ when the knowledge graph is
    /// used at test time).
    pub z: Vec<f64>,
}

/// Adapts from the (modulated) initialization on the support set and scores
/// the query set. Reads `state` only.
pub fn adapt_and_score(state: &LearnerState, cfg: &TrainConfig, episode: &Episode, kg_at_test: bool) -> Result<EpisodeScore> {
    let arch = &state.arch;
    let p = &state.params;
    let tape = Tape::new();
    let theta0 = arch.task.0.bind(&tape, p, true);
    let support_x = tape.constant(episode.support_x());
    let support_y = episode.support_y();

    let embed = arch.embed.0.bind(&tape, p, false);
    let protos = compute_prototypes(&arch.embed, &embed, support_x, &support_y, episode.n_way)?;
    let mut z = task_encoding(protos);
    if kg_at_test && cfg.use_kg {
        let pg = build_prototype_graph(protos, tape.constant(p.expect(TASK_EDGE).clone()))?;
        let (z_hat, _) = knowledge_enhanced_encoding(
            &pg,
            state.kg.bind(&tape),
            tape.constant(p.expect(KG_EDGE).clone()),
            tape.constant(p.expect(NMP_WEIGHT).clone()),
            cfg.gamma,
        )?;
        z = z_hat;
    }

    let start = if cfg.use_modulation {
        let gates = arch.modulation.bind(&tape, p, false);
        modulate(&theta0, &modulation_gates(z, &gates)?)?
    } else {
        theta0
    };
    // Values match the second-order loop; nothing is differentiated later.
    let inner = InnerLoop {
        first_order: true,
        ..cfg.inner_loop()
    };
    let adapted = inner_adapt(&arch.task, &start, support_x, &support_y, inner)?;
    let logits = arch.task.0.forward(&adapted, tape.constant(episode.query_x()));
    Ok(EpisodeScore {
        accuracy: accuracy(&logits.value(), &episode.query_y()),
        z: z.value().iter().copied().collect(),
    })
}

pub fn adapt_and_eval(state: &LearnerState, cfg: &TrainConfig, episode: &Episode, kg_at_test: bool) -> Result<f64> {
    adapt_and_score(state, cfg, episode, kg_at_test).map(|s| s.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Setting of the evaluated distribution.
    pub protocol: String,
    pub split: Split,
    pub kg_at_test: bool,
    pub n_episodes: usize,
    pub mean: f64,
    /// 95% normal-approximation half-width, `1.96·sd/√n`.
    pub half_width: f64,
    pub accuracies: Vec<f64>,
    pub config: TrainConfig,
}

/// Mean and 95% half-width using the sample standard deviation.
pub fn mean_and_half_width(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::config("eval.n_episodes", "must be at least 2"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.iter().all(|&x| x == xs[0]) {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

impl EvalReport {
    pub fn from_accuracies(
        protocol: impl Into<String>,
        split: Split,
        kg_at_test: bool,
        accuracies: Vec<f64>,
        config: TrainConfig,
    ) -> Result<Self> {
        let (mean, half_width) = mean_and_half_width(&accuracies)?;
        Ok(Self {
            protocol: protocol.into(),
            split,
            kg_at_test,
            n_episodes: accuracies.len(),
            mean,
            half_width,
            accuracies,
            config,
        })
    }

    /// `[lo, hi]` of the 95% interval.
    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }

    /// Whether the two intervals are disjoint with `self` above `other`.
    pub fn beats(&self, other: &EvalReport) -> bool {
        self.interval().0 > other.interval().1
    }

    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.half_width)
    }
}

/// Test episode `i` of an evaluation stream.
pub fn eval_episode(dist: &TaskDistribution, cfg: &TrainConfig, eval: &EvalConfig, split: Split, i: usize) -> Result<Episode> {
    dist.sample_episode(
        split,
        cfg.n_way,
        cfg.k_shot,
        eval.query_per_class,
        RngStream::new(eval.seed, streams::EVAL_EPISODES + i as u64),
    )
}

/// Runs `f` over `0..n` on `workers` threads, keeping results in index order.
pub(crate) fn ordered_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if workers > 1 && n > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    } else {
        (0..n).map(f).collect()
    }
}

/// Mean query accuracy over `eval.n_episodes` fresh episodes of `split`.
pub fn evaluate(state: &LearnerState, cfg: &TrainConfig, dist: &TaskDistribution, split: Split, eval: &EvalConfig) -> Result<EvalReport> {
    eval.validate()?;
    let accs = ordered_map(eval.n_episodes, eval.workers, |i| {
        let ep = eval_episode(dist, cfg, eval, split, i)?;
        adapt_and_eval(state, cfg, &ep, eval.kg_at_test)
    })?;
    EvalReport::from_accuracies(dist.config.setting.as_str(), split, eval.kg_at_test, accs, cfg.clone())
}

/// Trains `cfg` from scratch and evaluates on the test split.
pub fn train_and_evaluate(cfg: &TrainConfig, model: &ModelConfig, dist: &TaskDistribution, eval: &EvalConfig) -> Result<EvalReport> {
    let (state, _) = train(cfg, model, dist)?;
    evaluate(&state, cfg, dist, Split::Test, eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub ema_alpha: f64,
    pub lambda: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 0.2, 0.5];
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.05, 0.2];

/// Trains one fresh model per `(α, λ)` pair, all sharing `base.seed`. A
/// failing cell records its error and the grid carries on.
pub fn run_ablation_grid(
    base: &TrainConfig,
    model: &ModelConfig,
    dist: &TaskDistribution,
    eval: &EvalConfig,
    alphas: &[f64],
    lambdas: &[f64],
) -> AblationGrid {
    let mut cells = Vec::with_capacity(alphas.len() * lambdas.len());
    for &ema_alpha in alphas {
        for &lambda in lambdas {
            let cfg = TrainConfig {
                ema_alpha,
                lambda,
                ..base.clone()
            };
            let (report, error) = match train_and_evaluate(&cfg, model, dist, eval) {
                Ok(r) => (Some(r), None),
                Err(e) => {
                    log::error!("ablation cell α={ema_alpha} λ={lambda} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(AblationCell {
                ema_alpha,
                lambda,
                report,
                error,
            });
        }
    }
    AblationGrid { cells }
}

fn cell_text(r: &Option<EvalReport>, e: &Option<String>) -> String {
    match (r, e) {
        (Some(r), _) => r.summary(),
        (None, Some(e)) => format!("error: {e}"),
        (None, None) => "-".into(),
    }
}

fn csv_fields(r: &Option<EvalReport>, e: &Option<String>) -> String {
    match r {
        Some(r) => format!("{},{},{},", r.mean, r.half_width, r.n_episodes),
        None => format!(",,,{}", e.as_deref().unwrap_or("").replace([',', '\n'], " ")),
    }
}

impl AblationGrid {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>8}  accuracy (%)\n", "alpha", "lambda");
        for c in &self.cells {
            let _ = writeln!(s, "{:>8} {:>8}  {}", c.ema_alpha, c.lambda, cell_text(&c.report, &c.error));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ema_alpha,lambda,mean,half_width,n_episodes,error\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{}", c.ema_alpha, c.lambda, csv_fields(&c.report, &c.error));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Maml,
    Mumo,
    Caml,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Maml, Variant::Mumo, Variant::Caml];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Maml => "MAML",
            Variant::Mumo => "MuMo-style",
            Variant::Caml => "CAML",
        }
    }

    /// `base` with only the three component flags changed.
    pub fn configure(&self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::Maml => base.clone().maml(),
            Variant::Mumo => base.clone().mumo(),
            Variant::Caml => base.clone().caml(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub variant: Variant,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<BaselineRow>,
}

/// Trains MAML, the modulation-only baseline and the full method with
/// identical seeds, then evaluates all three on the same test episodes.
pub fn compare_baselines(base: &TrainConfig, model: &ModelConfig, dist: &TaskDistribution, eval: &EvalConfig) -> Comparison {
    let rows = Variant::ALL
        .iter()
        .map(|v| {
            let cfg = v.configure(base);
            match train_and_evaluate(&cfg, model, dist, eval) {
                Ok(r) => BaselineRow {
                    variant: *v,
                    report: Some(r),
                    error: None,
                },
                Err(e) => {
                    log::error!("{} failed: {e}", v.name());
                    BaselineRow {
                        variant: *v,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Comparison { rows }
}

impl Comparison {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.variant == v).and_then(|r| r.report.as_ref())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} accuracy (%)\n", "method");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {}", r.variant.name(), cell_text(&r.report, &r.error));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean,half_width,n_episodes,error\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.variant.name(), csv_fields(&r.report, &r.error));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_task_distribution, DistributionConfig};
    use crate::meta::{init_state, Architecture};

    fn small() -> (TrainConfig, ModelConfig, TaskDistribution) {
        let cfg = TrainConfig {
            kg_dim: 8,
            inner_steps: 2,
            iterations: 2,
            meta_batch: 2,
            query_per_class: 3,
            ..Default::default()
        };
        let model = ModelConfig {
            task_hidden: vec![8],
            embed_hidden: vec![8],
            ..Default::default()
        };
        let dist = make_task_distribution(&DistributionConfig::default(), 5, RngStream::new(0, streams::DISTRIBUTION)).unwrap();
        (cfg, model, dist)
    }

    #[test]
    fn half_width_formula() {
        let (m, h) = mean_and_half_width(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_half_width(&[0.4; 7]).unwrap().1, 0.0);
        assert!(mean_and_half_width(&[1.0]).is_err());
    }

    #[test]
    fn perfect_adaptation_scores_one() {
        // Output bias alone encodes the label of a single-class query set
        // after the model is forced to predict class 0 everywhere.
        let (cfg, model, dist) = small();
        let mut state = init_state(&cfg, &model, &dist).unwrap();
        let last = state.arch.task.0.n_layers() - 1;
        let wn = state.arch.task.0.weight_name(last);
        let bn = state.arch.task.0.bias_name(last);
        state.params.get_mut(&wn).unwrap().fill(0.0);
        let b = state.params.get_mut(&bn).unwrap();
        b.fill(-100.0);
        b[0] = 100.0;
        let cfg = TrainConfig { use_modulation: false, ..cfg };
        let mut ep = eval_episode(&dist, &cfg, &EvalConfig::default(), Split::Test, 0).unwrap();
        ep.query.retain(|s| s.y == 0);
        assert_eq!(adapt_and_eval(&state, &cfg, &ep, false).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance_and_pure() {
        let (cfg, model, dist) = small();
        let state = init_state(&cfg, &model, &dist).unwrap();
        let before = state.digest();
        let eval = EvalConfig {
            n_episodes: 200,
            query_per_class: 5,
            ..Default::default()
        };
        let r = evaluate(&state, &cfg, &dist, Split::Test, &eval).unwrap();
        assert!(r.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!((r.mean - 0.2).abs() < 0.1, "{}", r.mean);
        assert_eq!(state.digest(), before);
        let again = evaluate(&state, &cfg, &dist, Split::Test, &eval).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn kg_at_test_with_zero_message_weight_completes() {
        let (cfg, model, dist) = small();
        let mut state = init_state(&cfg, &model, &dist).unwrap();
        state.params.get_mut(NMP_WEIGHT).unwrap().fill(0.0);
        let ep = eval_episode(&dist, &cfg, &EvalConfig::default(), Split::Test, 1).unwrap();
        let s = adapt_and_score(&state, &cfg, &ep, true).unwrap();
        assert!(s.z.iter().all(|v| *v == 0.0));
        assert!((0.0..=1.0).contains(&s.accuracy));
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (cfg, model, dist) = small();
        let state = init_state(&cfg, &model, &dist).unwrap();
        let eval = EvalConfig {
            n_episodes: 12,
            ..Default::default()
        };
        let a = evaluate(&state, &cfg, &dist, Split::Test, &eval).unwrap();
        let b = evaluate(&state, &cfg, &dist, Split::Test, &EvalConfig { workers: 3, ..eval }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variants_differ_only_by_component_flags() {
        let base = TrainConfig::default();
        for v in Variant::ALL {
            let c = v.configure(&base);
            let back = TrainConfig {
                use_kg: base.use_kg,
                use_ckd: base.use_ckd,
                use_modulation: base.use_modulation,
                ..c
            };
            assert_eq!(back, base);
        }
        assert!(!Variant::Mumo.configure(&base).use_kg);
        assert!(!Variant::Maml.configure(&base).use_modulation);
    }

    #[test]
    fn single_cell_grid_equals_plain_run() {
        let (cfg, model, dist) = small();
        let eval = EvalConfig {
            n_episodes: 4,
            ..Default::default()
        };
        let grid = run_ablation_grid(&cfg, &model, &dist, &eval, &[0.2], &[0.05]);
        assert_eq!(grid.cells.len(), 1);
        let plain = train_and_evaluate(&cfg, &model, &dist, &eval).unwrap();
        assert_eq!(grid.cells[0].report.as_ref().unwrap(), &plain);
        assert_eq!(grid.to_csv().lines().count(), 2);
    }

    #[test]
    fn failing_cell_does_not_abort_grid() {
        let (cfg, model, dist) = small();
        let eval = EvalConfig {
            n_episodes: 2,
            ..Default::default()
        };
        let cfg = TrainConfig { iterations: 1, ..cfg };
        let grid = run_ablation_grid(&cfg, &model, &dist, &eval, &[2.0, 0.2], &[0.05]);
        assert!(grid.cells[0].error.as_ref().unwrap().contains("ema_alpha"));
        assert!(grid.cells[1].report.is_some());
        assert!(grid.to_table().contains("error"));
    }

    #[test]
    fn state_arch_matches_distribution() {
        let (cfg, model, dist) = small();
        let arch = Architecture::new(&model, dist.config.input_dim, &cfg).unwrap();
        assert_eq!(arch.task.n_way(), 5);
    }
}
