//! Prototype graph, meta knowledge graph, super-graph assembly and masked
//! neural message passing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

pub const NMP_WEIGHT: &str = "nmp.weight";
pub const TASK_EDGE: &str = "edge.task";
pub const KG_EDGE: &str = "edge.kg";

thread_local! {
    static KG_STOP_BYPASS: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Stop-gradient applied wherever knowledge graph features enter a
/// differentiated computation.
fn stop_kg<'t>(kg_nodes: Var<'t>) -> Var<'t> {
    if KG_STOP_BYPASS.with(|b| b.get()) {
        kg_nodes
    } else {
        kg_nodes.detach()
    }
}

/// Test hooks. Not part of the supported API.
#[doc(hidden)]
pub mod testing {
    /// Runs `f` on the current thread with the knowledge graph stop-gradient
    /// disabled.
    pub fn with_kg_stop_gradient_bypassed<R>(f: impl FnOnce() -> R) -> R {
        struct Reset(bool);
        impl Drop for Reset {
            fn drop(&mut self) {
                super::KG_STOP_BYPASS.with(|b| b.set(self.0));
            }
        }
        let _reset = Reset(super::KG_STOP_BYPASS.with(|b| b.replace(true)));
        f()
    }

    pub fn kg_stop_gradient_bypassed() -> bool {
        super::KG_STOP_BYPASS.with(|b| b.get())
    }
}

/// Default cross-edge temperature.
pub const DEFAULT_GAMMA: f64 = 8.0;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `σ(Uᵀ|a − b|)` for a single pair.
pub fn edge_weight(a: &[f64], b: &[f64], u: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != u.len() {
        return Err(Error::shape("edge_weight", a.len(), format!("{} / {}", b.len(), u.len())));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(u)
        .map(|((x, y), w)| w * (x - y).abs())
        .sum();
    Ok(sigmoid(s))
}

/// Learnable-edge adjacency over the rows of `nodes` (`n x d`) with a shared
/// edge vector `u` (`d x 1`). The diagonal is zero.
pub fn learnable_adjacency<'t>(nodes: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let (n, d) = nodes.shape();
    if u.shape() != (d, 1) {
        return Err(Error::shape("edge parameter", format!("{d}x1"), format!("{:?}", u.shape())));
    }
    let left: Vec<usize> = (0..n * n).map(|i| i / n).collect();
    let right: Vec<usize> = (0..n * n).map(|i| i % n).collect();
    let diff = (nodes.gather_rows(&left) - nodes.gather_rows(&right)).abs();
    let weights = diff.matmul(u).sigmoid().reshape(n, n);
    let off_diag = Mat::from_fn(n, n, |r, c| if r == c { 0.0 } else { 1.0 });
    Ok(weights * nodes.tape().constant(off_diag))
}

/// Per-episode class-prototype graph.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeGraph<'t> {
    pub nodes: Var<'t>,
    pub adjacency: Var<'t>,
}

pub fn build_prototype_graph<'t>(protos: Var<'t>, u_task: Var<'t>) -> Result<PrototypeGraph<'t>> {
    let n = protos.shape().0;
    if n < 2 {
        return Err(Error::Graph {
            nodes: n,
            reason: "a prototype graph needs at least 2 classes",
        });
    }
    Ok(PrototypeGraph {
        nodes: protos,
        adjacency: learnable_adjacency(protos, u_task)?,
    })
}

/// Persistent knowledge graph node features. They are only ever changed by
/// the moving-average update; there is no gradient slot for them.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaKnowledgeGraph {
    pub node_features: Mat,
}

impl MetaKnowledgeGraph {
    /// Standard normal entries scaled by `1/sqrt(dim)`.
    pub fn random(n_nodes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let node_features = Mat::from_fn(n_nodes, dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Self { node_features }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.node_features.ncols()
    }

    /// The node features as a stop-gradient input.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(self.node_features.clone())
    }
}

/// Near-zero initial edge vector, so initial edges sit close to 0.5.
pub fn init_edge_param(dim: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(dim, 1, |_, _| rng.random_range(-0.01..0.01))
}

/// Softmax over all `N·M` negative squared distances divided by `gamma`.
/// Gradients reach `protos`; `kg_nodes` is detached.
pub fn cross_edges<'t>(protos: Var<'t>, kg_nodes: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::config("gamma", "must be positive"));
    }
    let (n, d) = protos.shape();
    let (m, dk) = kg_nodes.shape();
    if d != dk {
        return Err(Error::shape("cross_edges node dim", d, dk));
    }
    let kg = stop_kg(kg_nodes);
    let left: Vec<usize> = (0..n * m).map(|i| i / m).collect();
    let right: Vec<usize> = (0..n * m).map(|i| i % m).collect();
    let diff = protos.gather_rows(&left) - kg.gather_rows(&right);
    let logits = (diff * diff).sum_cols().scale(-1.0 / gamma);
    let max = logits.with_value(|v| v.max());
    let e = logits.offset(-max).exp();
    let total = e.sum();
    let normalized = e * total.powf(-1.0).expand(n * m, 1);
    Ok(normalized.reshape(n, m))
}

/// Stacked prototype and knowledge graph nodes with block adjacency
/// `[A_proto  C; Cᵀ  A_kg]`.
#[derive(Clone, Copy, Debug)]
pub struct SuperGraph<'t> {
    pub features: Var<'t>,
    pub adjacency: Var<'t>,
    pub n_proto: usize,
    pub n_kg: usize,
}

pub fn assemble_super_graph<'t>(
    pg: &PrototypeGraph<'t>,
    kg_nodes: Var<'t>,
    u_kg: Var<'t>,
    gamma: f64,
) -> Result<SuperGraph<'t>> {
    let (n, d) = pg.nodes.shape();
    let (m, dk) = kg_nodes.shape();
    if d != dk {
        return Err(Error::shape("super-graph node dim", d, dk));
    }
    let kg = stop_kg(kg_nodes);
    let c = cross_edges(pg.nodes, kg, gamma)?;
    let a_kg = learnable_adjacency(kg, u_kg)?;
    let top = pg.adjacency.concat_cols(c);
    let bottom = c.t().concat_cols(a_kg);
    Ok(SuperGraph {
        features: pg.nodes.concat_rows(kg),
        adjacency: top.concat_rows(bottom),
        n_proto: n,
        n_kg: m,
    })
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency<'t>(adjacency: Var<'t>) -> Var<'t> {
    let n = adjacency.shape().0;
    let with_loops = adjacency + adjacency.tape().constant(Mat::identity(n, n));
    let dinv = with_loops.sum_cols().powf(-0.5);
    with_loops * dinv.matmul(dinv.t())
}

/// Single-layer graph convolution `tanh(Â H W)`. Rows marked in `frozen`
/// are copied from the input features verbatim; they still send messages.
pub fn nmp<'t>(
    adjacency: Var<'t>,
    features: Var<'t>,
    weight: Var<'t>,
    frozen: &[bool],
) -> Result<Var<'t>> {
    let (n, d) = features.shape();
    if adjacency.shape() != (n, n) {
        return Err(Error::shape("nmp adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.shape())));
    }
    if weight.shape() != (d, d) {
        return Err(Error::shape("nmp weight", format!("{d}x{d}"), format!("{:?}", weight.shape())));
    }
    if frozen.len() != n {
        return Err(Error::shape("nmp freeze mask", n, frozen.len()));
    }
    if frozen.iter().all(|&f| f) {
        return Ok(features);
    }
    let updated = normalized_adjacency(adjacency)
        .matmul(features)
        .matmul(weight)
        .tanh();
    if frozen.iter().all(|&f| !f) {
        return Ok(updated);
    }
    let pick: Vec<usize> = frozen
        .iter()
        .enumerate()
        .map(|(i, &f)| if f { n + i } else { i })
        .collect();
    Ok(updated.concat_rows(features).gather_rows(&pick))
}

impl<'t> SuperGraph<'t> {
    /// Full message-passing output over all `n_proto + n_kg` rows. Exactly
    /// one side is updated; the other side's rows are copied through.
    pub fn propagate(&self, weight: Var<'t>, update_prototypes: bool) -> Result<Var<'t>> {
        nmp(self.adjacency, self.features, weight, &self.freeze_mask(update_prototypes))
    }

    /// Message passing that updates only the prototype rows.
    pub fn update_prototypes(&self, weight: Var<'t>) -> Result<Var<'t>> {
        Ok(self.propagate(weight, true)?.rows(0, self.n_proto))
    }

    /// Message passing that updates only the knowledge graph rows.
    pub fn update_knowledge(&self, weight: Var<'t>) -> Result<Var<'t>> {
        Ok(self.propagate(weight, false)?.rows(self.n_proto, self.n_kg))
    }

    /// `true` marks a frozen row.
    pub fn freeze_mask(&self, update_prototypes: bool) -> Vec<bool> {
        (0..self.n_proto + self.n_kg)
            .map(|i| (i < self.n_proto) != update_prototypes)
            .collect()
    }
}
