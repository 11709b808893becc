//! Per-episode meta-objective: query loss after modulated inner adaptation
//! plus the weighted contrastive distillation term.

use rayon::prelude::*;

use crate::encoding::{compute_prototypes, contrastive_loss, knowledge_enhanced_encoding, task_encoding};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graphs::{build_prototype_graph, init_edge_param, testing, KG_EDGE, NMP_WEIGHT, TASK_EDGE};
use crate::modulation::{inner_adapt, modulate, modulation_gates};
use crate::nets::{accuracy, cross_entropy, Layer, ParamBlocks};
use crate::rng::{streams, RngStream};
use crate::tape::{Mat, Tape, Var};

use super::{LearnerState, TrainConfig};

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    /// Gradient of this episode's objective for every meta-learned block.
    pub grads: ParamBlocks,
    /// Only present while the knowledge graph stop-gradient is bypassed.
    pub kg_grad: Option<Mat>,
    pub objective: f64,
    pub query_loss: f64,
    pub query_acc: f64,
    pub ckd: Option<f64>,
}

/// Edge vector used in place of the learned one when
/// `rerandomize_kg_edges` is set.
pub fn kg_edge_override(state: &LearnerState, cfg: &TrainConfig, iteration: u64, slot: usize) -> Option<Mat> {
    cfg.rerandomize_kg_edges.then(|| {
        let id = streams::KG_EDGE_RESET + iteration * cfg.meta_batch as u64 + slot as u64;
        init_edge_param(state.arch.dim, &mut RngStream::new(cfg.seed, id).rng())
    })
}

struct Bound<'t> {
    names: Vec<String>,
    leaves: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    fn new(tape: &'t Tape, params: &ParamBlocks) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut leaves = Vec::with_capacity(params.len());
        for (n, m) in params.iter() {
            names.push(n.to_string());
            leaves.push(tape.leaf(m.clone()));
        }
        Self { names, leaves }
    }

    fn get(&self, name: &str) -> Var<'t> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"));
        self.leaves[i]
    }

    fn layers(&self, weight: impl Fn(usize) -> String, bias: impl Fn(usize) -> String, n: usize) -> Vec<Layer<'t>> {
        (0..n)
            .map(|l| Layer {
                weight: self.get(&weight(l)),
                bias: self.get(&bias(l)),
            })
            .collect()
    }
}

/// Evaluates one episode's contribution to the meta-objective and its
/// gradient with respect to all meta-learned parameters.
pub fn episode_objective(
    state: &LearnerState,
    cfg: &TrainConfig,
    episode: &Episode,
    kg_edge: Option<&Mat>,
) -> Result<EpisodeOutcome> {
    let arch = &state.arch;
    let tape = Tape::new();
    let bound = Bound::new(&tape, &state.params);
    let task = &arch.task.0;
    let embed = &arch.embed.0;
    let theta0 = bound.layers(|l| task.weight_name(l), |l| task.bias_name(l), task.n_layers());

    let bypass = testing::kg_stop_gradient_bypassed();
    let kg_nodes = if bypass {
        tape.leaf(state.kg.node_features.clone())
    } else {
        state.kg.bind(&tape)
    };

    let support_x = tape.constant(episode.support_x());
    let support_y = episode.support_y();
    let query_x = tape.constant(episode.query_x());
    let query_y = episode.query_y();

    let encoding = if cfg.use_modulation || cfg.use_ckd {
        let embed_layers = bound.layers(|l| embed.weight_name(l), |l| embed.bias_name(l), embed.n_layers());
        let protos = compute_prototypes(&arch.embed, &embed_layers, support_x, &support_y, episode.n_way)?;
        Some((task_encoding(protos), protos))
    } else {
        None
    };

    let start = match (cfg.use_modulation, encoding) {
        (true, Some((z, _))) => {
            let gate_params = bound.layers(
                crate::modulation::ModulationSpec::weight_name,
                crate::modulation::ModulationSpec::bias_name,
                arch.modulation.widths.len(),
            );
            modulate(&theta0, &modulation_gates(z, &gate_params)?)?
        }
        _ => theta0.clone(),
    };

    let adapted = inner_adapt(&arch.task, &start, support_x, &support_y, cfg.inner_loop())?;
    let logits = task.forward(&adapted, query_x);
    let query_loss = cross_entropy(logits, &query_y)?;
    let query_acc = accuracy(&logits.value(), &query_y);

    let ckd = match (cfg.use_ckd, encoding) {
        (true, Some((z, protos))) => {
            let u_kg = match kg_edge {
                Some(u) => tape.constant(u.clone()),
                None => bound.get(KG_EDGE),
            };
            let pg = build_prototype_graph(protos, bound.get(TASK_EDGE))?;
            let (z_hat, _) = knowledge_enhanced_encoding(&pg, kg_nodes, u_kg, bound.get(NMP_WEIGHT), cfg.gamma)?;
            Some(contrastive_loss(z, z_hat, protos, cfg.ckd_temperature)?)
        }
        _ => None,
    };

    let total = match ckd {
        Some(l) if cfg.ckd_active() => query_loss + l.scale(cfg.lambda),
        _ => query_loss,
    };
    let objective = total.item();
    if !objective.is_finite() {
        return Err(Error::NonFinite {
            context: format!("meta-objective (query loss {})", query_loss.item()),
        });
    }

    let mut wrt = bound.leaves.clone();
    if bypass {
        wrt.push(kg_nodes);
    }
    let mut grads_raw = tape.grad_values(total, &wrt);
    let kg_grad = bypass.then(|| grads_raw.pop().expect("kg gradient"));
    let mut grads = ParamBlocks::new();
    for (name, g) in bound.names.iter().zip(grads_raw) {
        grads.insert(name.clone(), g);
    }

    Ok(EpisodeOutcome {
        grads,
        kg_grad,
        objective,
        query_loss: query_loss.item(),
        query_acc,
        ckd: ckd.map(|l| l.item()),
    })
}

#[derive(Clone, Debug)]
pub struct BatchGradients {
    /// Mean of the per-episode gradients.
    pub grads: ParamBlocks,
    pub kg_grad: Option<Mat>,
    /// Mean of the per-episode objectives.
    pub objective: f64,
    pub outcomes: Vec<EpisodeOutcome>,
    /// Indices of episodes dropped because their objective was not finite.
    pub skipped: Vec<usize>,
}

/// Evaluates the batch objective. Per-episode work may run on `cfg.workers`
/// threads; the reduction always runs in batch order.
pub fn meta_gradients(
    state: &LearnerState,
    cfg: &TrainConfig,
    batch: &[Episode],
    iteration: u64,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty meta-batch".into()));
    }
    let run = |(slot, ep): (usize, &Episode)| {
        let edge = kg_edge_override(state, cfg, iteration, slot);
        episode_objective(state, cfg, ep, edge.as_ref())
    };
    let results: Vec<Result<EpisodeOutcome>> = if cfg.workers > 1 && batch.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().enumerate().map(run).collect())
    } else {
        batch.iter().enumerate().map(run).collect()
    };

    let mut outcomes = Vec::with_capacity(batch.len());
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(Error::NonFinite { context }) => {
                log::warn!("iteration {iteration}: dropping episode {i}: non-finite {context}");
                skipped.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    if outcomes.is_empty() {
        return Err(Error::NonFinite {
            context: format!("every episode of iteration {iteration}"),
        });
    }

    let n = outcomes.len() as f64;
    let mut grads = outcomes[0].grads.clone();
    for o in &outcomes[1..] {
        for (name, g) in grads.iter_mut() {
            *g += o.grads.expect(name);
        }
    }
    for (_, g) in grads.iter_mut() {
        *g /= n;
    }
    let kg_grad = outcomes[0].kg_grad.as_ref().map(|first| {
        let mut sum = first.clone();
        for o in &outcomes[1..] {
            sum += o.kg_grad.as_ref().expect("kg gradient");
        }
        sum / n
    });
    let objective = outcomes.iter().map(|o| o.objective).sum::<f64>() / n;
    Ok(BatchGradients {
        grads,
        kg_grad,
        objective,
        outcomes,
        skipped,
    })
}
