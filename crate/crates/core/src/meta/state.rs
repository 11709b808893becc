use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{init_edge_param, MetaKnowledgeGraph, KG_EDGE, NMP_WEIGHT, TASK_EDGE};
use crate::modulation::ModulationSpec;
use crate::nets::{Activation, EmbeddingNet, ParamBlocks, TaskNetwork};
use crate::rng::{streams, RngStream};
use crate::tape::Mat;

use super::optim::AdamState;
use super::TrainConfig;

/// Hidden-layer layout of the two networks. Input and output widths come
/// from the task distribution and the training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task_hidden: Vec<usize>,
    pub task_activation: Activation,
    pub embed_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task_hidden: vec![32, 32],
            task_activation: Activation::Relu,
            embed_hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub task: TaskNetwork,
    pub embed: EmbeddingNet,
    pub modulation: ModulationSpec,
    pub kg_nodes: usize,
    pub dim: usize,
}

impl Architecture {
    pub fn new(model: &ModelConfig, input_dim: usize, train: &TrainConfig) -> Result<Self> {
        let mut task_widths = vec![input_dim];
        task_widths.extend(&model.task_hidden);
        task_widths.push(train.n_way);
        let task = TaskNetwork::new(task_widths, model.task_activation)?;

        let mut embed_widths = vec![input_dim];
        embed_widths.extend(&model.embed_hidden);
        embed_widths.push(train.kg_dim);
        let embed = EmbeddingNet::new(embed_widths, train.kg_dim)?;

        let modulation = ModulationSpec::for_task_network(&task, train.kg_dim);
        Ok(Self {
            task,
            embed,
            modulation,
            kg_nodes: train.kg_nodes,
            dim: train.kg_dim,
        })
    }
}

/// Everything training mutates.
///
/// `params` is exactly the meta-learned set: task network, embedding
/// network, gates, message passing weight and both edge vectors. The
/// knowledge graph features live outside it and have no optimizer slot.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub arch: Architecture,
    pub params: ParamBlocks,
    pub kg: MetaKnowledgeGraph,
    pub optimizer: AdamState,
    pub iteration: u64,
    pub seed: u64,
}

impl LearnerState {
    /// Seeded initialization. The task network is drawn first, so every
    /// variant sharing a seed starts from the same θ₀.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, streams::INIT).rng();
        let mut params = ParamBlocks::new();
        arch.task.0.init(&mut rng, &mut params);
        arch.embed.0.init(&mut rng, &mut params);
        arch.modulation.init(&mut rng, &mut params);
        let bound = 1.0 / (arch.dim as f64).sqrt();
        let nmp = Mat::from_fn(arch.dim, arch.dim, |_, _| {
            rand::Rng::random_range(&mut rng, -bound..bound)
        });
        params.insert(NMP_WEIGHT, nmp);
        params.insert(TASK_EDGE, init_edge_param(arch.dim, &mut rng));
        params.insert(KG_EDGE, init_edge_param(arch.dim, &mut rng));
        let kg = MetaKnowledgeGraph::random(arch.kg_nodes, arch.dim, &mut rng);
        let optimizer = AdamState::new(&params);
        Self {
            arch,
            params,
            kg,
            optimizer,
            iteration: 0,
            seed,
        }
    }

    pub fn task_params(&self) -> ParamBlocks {
        self.params.subset("task.")
    }

    /// Checks that `other` has the same block names and shapes.
    pub fn check_compatible(&self, other: &ParamBlocks) -> Result<()> {
        for (name, m) in self.params.iter() {
            match other.get(name) {
                Some(o) if o.shape() == m.shape() => {}
                Some(o) => {
                    return Err(Error::shape(
                        "parameter block",
                        format!("{name} {:?}", m.shape()),
                        format!("{:?}", o.shape()),
                    ))
                }
                None => return Err(Error::Invalid(format!("missing parameter block {name}"))),
            }
        }
        if other.len() != self.params.len() {
            return Err(Error::Invalid("unexpected extra parameter blocks".into()));
        }
        Ok(())
    }

    /// Stable digest of the full state, for purity and determinism checks.
    pub fn digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |blocks: &ParamBlocks| {
            for (name, m) in blocks.iter() {
                name.hash(&mut h);
                for v in m.iter() {
                    v.to_bits().hash(&mut h);
                }
            }
        };
        feed(&self.params);
        feed(&self.optimizer.m);
        feed(&self.optimizer.v);
        for v in self.kg.node_features.iter() {
            v.to_bits().hash(&mut h);
        }
        self.optimizer.t.hash(&mut h);
        self.iteration.hash(&mut h);
        self.seed.hash(&mut h);
        h.finish()
    }
}
