use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoding::compute_prototypes;
use crate::episodes::{Episode, Split, TaskDistribution};
use crate::error::{Error, Result};
use crate::graphs::{assemble_super_graph, build_prototype_graph, KG_EDGE, NMP_WEIGHT, TASK_EDGE};
use crate::rng::{streams, RngStream};
use crate::tape::{Mat, Tape};

use super::objective::{kg_edge_override, meta_gradients};
use super::optim::clip_global_norm;
use super::{Architecture, LearnerState, ModelConfig, TrainConfig};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub mean_query_acc: f64,
    pub mean_query_loss: f64,
    pub mean_ckd: Option<f64>,
    pub wallclock: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub seed: u64,
    pub lambda: f64,
    pub ema_alpha: f64,
    pub records: Vec<IterationRecord>,
}

impl MetricsLog {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            seed: cfg.seed,
            lambda: cfg.lambda,
            ema_alpha: cfg.ema_alpha,
            records: Vec::new(),
        }
    }

    /// Line-delimited JSON, one record per line, fields in declaration order.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| record_line(r) + "\n").collect()
    }

    /// Centered moving average of query accuracy with the given window.
    pub fn smoothed_accuracy(&self, window: usize) -> Vec<f64> {
        let acc: Vec<f64> = self.records.iter().map(|r| r.mean_query_acc).collect();
        let w = window.max(1);
        (0..acc.len())
            .map(|i| {
                let lo = i.saturating_sub(w / 2);
                let hi = (i + w / 2 + 1).min(acc.len());
                acc[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }
}

pub fn record_line(r: &IterationRecord) -> String {
    serde_json::to_string(r).expect("record serializes")
}

/// Callbacks invoked by the training loop after every iteration.
pub trait TrainHooks {
    fn on_iteration(&mut self, _state: &LearnerState, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Report of one outer update, computed at the pre-update parameters.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub objective: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub mean_query_acc: f64,
    pub mean_query_loss: f64,
    pub mean_ckd: Option<f64>,
}

/// Training episodes for `iteration`. Streams depend only on the seed and
/// the iteration, so resumed and uninterrupted runs see the same tasks.
pub fn sample_batch(dist: &TaskDistribution, cfg: &TrainConfig, iteration: u64) -> Result<Vec<Episode>> {
    (0..cfg.meta_batch)
        .map(|b| {
            let id = streams::TRAIN_EPISODES + iteration * cfg.meta_batch as u64 + b as u64;
            dist.sample_episode(
                Split::Train,
                cfg.n_way,
                cfg.k_shot,
                cfg.query_per_class,
                RngStream::new(cfg.seed, id),
            )
        })
        .collect()
}

/// One adaptive-moment update of every meta-learned block. The knowledge
/// graph features are never written here.
pub fn meta_step(state: &mut LearnerState, cfg: &TrainConfig, batch: &[Episode]) -> Result<StepReport> {
    let mut bg = meta_gradients(state, cfg, batch, state.iteration)?;
    let grad_norm = clip_global_norm(&mut bg.grads, cfg.grad_clip);
    let clipped = grad_norm > cfg.grad_clip;
    if clipped {
        log::warn!(
            "iteration {}: meta-gradient norm {grad_norm:.3e} clipped to {:.1e}",
            state.iteration,
            cfg.grad_clip
        );
    }
    state.optimizer.step(&mut state.params, &bg.grads, &cfg.adam());
    if let Some(g) = &bg.kg_grad {
        // Only reachable with the stop-gradient bypassed: H_M would then be
        // trained like any other parameter.
        state.kg.node_features -= g * cfg.outer_lr;
    }
    let n = bg.outcomes.len() as f64;
    let mean = |f: &dyn Fn(&super::EpisodeOutcome) -> f64| bg.outcomes.iter().map(f).sum::<f64>() / n;
    let mean_ckd = if bg.outcomes.iter().all(|o| o.ckd.is_some()) {
        Some(mean(&|o| o.ckd.unwrap()))
    } else {
        None
    };
    Ok(StepReport {
        objective: bg.objective,
        grad_norm,
        clipped,
        mean_query_acc: mean(&|o| o.query_acc),
        mean_query_loss: mean(&|o| o.query_loss),
        mean_ckd,
    })
}

/// Batch mean of the knowledge graph rows produced by message passing with
/// the prototype rows frozen. Uses the current (post-update) parameters and
/// records nothing for differentiation.
pub fn kg_targets(state: &LearnerState, cfg: &TrainConfig, batch: &[Episode], iteration: u64) -> Result<Option<Mat>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let arch = &state.arch;
    let p = &state.params;
    let mut sum: Option<Mat> = None;
    for (slot, ep) in batch.iter().enumerate() {
        let tape = Tape::new();
        let embed = arch.embed.0.bind(&tape, p, false);
        let protos = compute_prototypes(
            &arch.embed,
            &embed,
            tape.constant(ep.support_x()),
            &ep.support_y(),
            ep.n_way,
        )?;
        let pg = build_prototype_graph(protos, tape.constant(p.expect(TASK_EDGE).clone()))?;
        let u_kg = kg_edge_override(state, cfg, iteration, slot).unwrap_or_else(|| p.expect(KG_EDGE).clone());
        let sg = assemble_super_graph(&pg, state.kg.bind(&tape), tape.constant(u_kg), cfg.gamma)?;
        let h_hat = sg.update_knowledge(tape.constant(p.expect(NMP_WEIGHT).clone()))?.value();
        sum = Some(match sum {
            Some(s) => s + h_hat,
            None => h_hat,
        });
    }
    Ok(sum.map(|s| s / batch.len() as f64))
}

/// `h ← h + α(ĥ − h)`, which leaves `h` untouched exactly when `ĥ = h` or
/// `α = 0`; `α = 1` copies `ĥ`.
pub fn apply_ema(nodes: &mut Mat, target: &Mat, alpha: f64) {
    if alpha == 1.0 {
        nodes.copy_from(target);
        return;
    }
    for i in 0..nodes.len() {
        nodes[i] += alpha * (target[i] - nodes[i]);
    }
}

/// Moving-average update of the knowledge graph from the batch. Must run
/// after [`meta_step`] for the same iteration.
pub fn kg_update(state: &mut LearnerState, cfg: &TrainConfig, batch: &[Episode], iteration: u64) -> Result<()> {
    if !cfg.use_kg {
        return Ok(());
    }
    if let Some(target) = kg_targets(state, cfg, batch, iteration)? {
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("knowledge graph update at iteration {iteration}"),
            });
        }
        apply_ema(&mut state.kg.node_features, &target, cfg.ema_alpha);
    }
    Ok(())
}

pub fn init_state(cfg: &TrainConfig, model: &ModelConfig, dist: &TaskDistribution) -> Result<LearnerState> {
    cfg.validate()?;
    let arch = Architecture::new(model, dist.config.input_dim, cfg)?;
    Ok(LearnerState::init(arch, cfg.seed))
}

/// Fresh training run for `cfg.iterations` iterations.
pub fn train(cfg: &TrainConfig, model: &ModelConfig, dist: &TaskDistribution) -> Result<(LearnerState, MetricsLog)> {
    let state = init_state(cfg, model, dist)?;
    train_from(state, cfg, dist, cfg.iterations, &mut NoHooks)
}

/// Continues training `state` until its iteration counter reaches `until`.
pub fn train_from(
    mut state: LearnerState,
    cfg: &TrainConfig,
    dist: &TaskDistribution,
    until: u64,
    hooks: &mut dyn TrainHooks,
) -> Result<(LearnerState, MetricsLog)> {
    cfg.validate()?;
    let mut log = MetricsLog::new(cfg);
    let start = Instant::now();
    while state.iteration < until {
        let t = state.iteration;
        let batch = sample_batch(dist, cfg, t)?;
        let report = meta_step(&mut state, cfg, &batch)?;
        kg_update(&mut state, cfg, &batch, t)?;
        state.iteration += 1;
        let record = IterationRecord {
            iteration: t,
            mean_query_acc: report.mean_query_acc,
            mean_query_loss: report.mean_query_loss,
            mean_ckd: report.mean_ckd,
            wallclock: cfg.record_wallclock.then(|| start.elapsed().as_secs_f64()),
        };
        hooks.on_iteration(&state, &record)?;
        log.records.push(record);
    }
    Ok((state, log))
}
