//! Contrastive knowledge-augmented task-aware modulation for gradient-based
//! meta-learning, on synthetic heterogeneous few-shot task distributions.
//!
//! The crate is organized bottom-up:
//!
//! - [`tape`]: reverse-mode autodiff whose gradients are differentiable again
//! - [`episodes`]: seeded N-way k-shot task generation
//! - [`nets`]: embedding and task networks, cross-entropy
//! - [`graphs`]: prototype graph, knowledge graph, super-graph, message passing
//! - [`encoding`]: prototypes, task encodings, contrastive distillation loss
//! - [`modulation`]: gated initialization and inner-loop adaptation
//! - [`meta`]: meta-objective, outer optimizer, knowledge graph update, training
//! - [`eval`]: test-time adaptation, baselines and ablation grids
//! - [`analysis`]: k-NN graphs and graph Fourier analysis of task encodings
//! - [`checkpoint`], [`config`], [`cli`]: persistence and the experiment front-end
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoding;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod meta;
pub mod modulation;
pub mod nets;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
