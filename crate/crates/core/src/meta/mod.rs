//! Meta-training: the bi-level objective, the outer optimizer and the
//! knowledge graph moving-average update, glued into the training loop.

mod objective;
mod optim;
mod state;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::DEFAULT_GAMMA;
use crate::modulation::InnerLoop;

pub use objective::{
    episode_objective, kg_edge_override, meta_gradients, BatchGradients, EpisodeOutcome,
};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use state::{Architecture, LearnerState, ModelConfig};
pub use train::{
    apply_ema, init_state, kg_targets, kg_update, meta_step, record_line, sample_batch, train, train_from,
    IterationRecord, MetricsLog, NoHooks, StepReport, TrainHooks,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub iterations: u64,
    pub meta_batch: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm threshold above which meta-gradients are clipped.
    pub grad_clip: f64,
    /// Weight of the contrastive distillation term.
    pub lambda: f64,
    /// Moving-average coefficient for knowledge graph node features.
    pub ema_alpha: f64,
    pub gamma: f64,
    pub kg_nodes: usize,
    pub kg_dim: usize,
    pub ckd_temperature: f64,
    /// Save a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Worker threads for per-episode gradients. Results do not depend on it.
    pub workers: usize,
    pub use_kg: bool,
    pub use_modulation: bool,
    pub use_ckd: bool,
    pub first_order: bool,
    pub kg_at_test: bool,
    /// Redraw the knowledge graph edge vector for every episode instead of
    /// meta-learning it.
    pub rerandomize_kg_edges: bool,
    /// Write elapsed seconds into the metrics log. Off by default because it
    /// makes logs differ between otherwise identical runs.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_way: 5,
            k_shot: 1,
            query_per_class: 15,
            iterations: 1000,
            meta_batch: 4,
            inner_lr: 0.05,
            inner_steps: 5,
            outer_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1e4,
            lambda: 0.05,
            ema_alpha: 0.2,
            gamma: DEFAULT_GAMMA,
            kg_nodes: 4,
            kg_dim: 128,
            ckd_temperature: 1.0,
            checkpoint_every: 0,
            workers: 1,
            use_kg: true,
            use_modulation: true,
            use_ckd: true,
            first_order: false,
            kg_at_test: false,
            rerandomize_kg_edges: false,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    /// Full method: modulation, knowledge graph and distillation.
    pub fn caml(self) -> Self {
        Self {
            use_modulation: true,
            use_kg: true,
            use_ckd: true,
            ..self
        }
    }

    /// Task-aware modulation without any knowledge components.
    pub fn mumo(self) -> Self {
        Self {
            use_modulation: true,
            use_kg: false,
            use_ckd: false,
            ..self
        }
    }

    pub fn maml(self) -> Self {
        Self {
            use_modulation: false,
            use_kg: false,
            use_ckd: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{field}"), reason))
            }
        };
        check(self.n_way >= 2, "n_way", "must be at least 2")?;
        check(self.k_shot >= 1, "k_shot", "must be at least 1")?;
        check(self.query_per_class >= 1, "query_per_class", "must be at least 1")?;
        check(self.meta_batch >= 1, "meta_batch", "must be at least 1")?;
        check(self.inner_lr > 0.0, "inner_lr", "must be positive")?;
        check(self.outer_lr > 0.0, "outer_lr", "must be positive")?;
        check(self.lambda >= 0.0, "lambda", "must be non-negative")?;
        check((0.0..=1.0).contains(&self.ema_alpha), "ema_alpha", "must be in [0, 1]")?;
        check(self.gamma > 0.0, "gamma", "must be positive")?;
        check(self.kg_nodes >= 1, "kg_nodes", "must be at least 1")?;
        check(self.kg_dim >= 1, "kg_dim", "must be at least 1")?;
        check(self.ckd_temperature > 0.0, "ckd_temperature", "must be positive")?;
        check(self.grad_clip > 0.0, "grad_clip", "must be positive")?;
        check(self.workers >= 1, "workers", "must be at least 1")?;
        check(
            !self.use_ckd || self.use_kg,
            "use_ckd",
            "the distillation term needs use_kg = true",
        )?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.outer_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn inner_loop(&self) -> InnerLoop {
        InnerLoop {
            lr: self.inner_lr,
            steps: self.inner_steps,
            first_order: self.first_order,
        }
    }

    /// Whether the distillation term contributes to the gradient.
    pub fn ckd_active(&self) -> bool {
        self.use_ckd && self.lambda > 0.0
    }
}
