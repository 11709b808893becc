//! Class prototypes, task encodings and the contrastive distillation loss.

use crate::error::{Error, Result};
use crate::graphs::{assemble_super_graph, PrototypeGraph};
use crate::nets::{EmbeddingNet, Layer};
use crate::tape::{Mat, Var};

/// Norm guard used by every cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct TaskEncoding<'t> {
    pub z: Var<'t>,
    pub protos: Var<'t>,
    pub z_hat: Option<Var<'t>>,
    pub protos_hat: Option<Var<'t>>,
}

/// Row `n` is the mean embedding of the support samples labelled `n`.
pub fn compute_prototypes<'t>(
    net: &EmbeddingNet,
    layers: &[Layer<'t>],
    support_x: Var<'t>,
    support_y: &[usize],
    n_way: usize,
) -> Result<Var<'t>> {
    let n = support_x.shape().0;
    if support_y.len() != n {
        return Err(Error::shape("support labels", n, support_y.len()));
    }
    let mut counts = vec![0usize; n_way];
    for &y in support_y {
        if y >= n_way {
            return Err(Error::Label { label: y, n_way });
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("class {empty} has no support samples")));
    }
    let averaging = Mat::from_fn(n_way, n, |c, j| {
        if support_y[j] == c {
            1.0 / counts[c] as f64
        } else {
            0.0
        }
    });
    let embeddings = net.0.forward(layers, support_x);
    Ok(support_x.tape().constant(averaging).matmul(embeddings))
}

/// Unweighted mean of the prototype rows, as a `1 x d` row.
pub fn task_encoding<'t>(protos: Var<'t>) -> Var<'t> {
    let n = protos.shape().0;
    protos.sum_rows().scale(1.0 / n as f64)
}

/// Message passing over the super-graph with the knowledge graph rows
/// frozen; returns `(z_hat, protos_hat)`.
pub fn knowledge_enhanced_encoding<'t>(
    pg: &PrototypeGraph<'t>,
    kg_nodes: Var<'t>,
    u_kg: Var<'t>,
    nmp_weight: Var<'t>,
    gamma: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let sg = assemble_super_graph(pg, kg_nodes, u_kg, gamma)?;
    let protos_hat = sg.update_prototypes(nmp_weight)?;
    Ok((task_encoding(protos_hat), protos_hat))
}

fn inv_norms<'t>(rows: Var<'t>) -> Var<'t> {
    (rows * rows).sum_cols().offset(COSINE_EPS * COSINE_EPS).powf(-0.5)
}

/// Cosine similarity of two `1 x d` rows.
pub fn cosine<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a * b).sum() * inv_norms(a) * inv_norms(b)
}

/// `-log[e^{cos(z,ẑ)/τ} / (e^{cos(z,ẑ)/τ} + Σ_{m<n} e^{cos(v_m,v_n)/τ})]`.
pub fn contrastive_loss<'t>(
    z: Var<'t>,
    z_hat: Var<'t>,
    protos: Var<'t>,
    temperature: f64,
) -> Result<Var<'t>> {
    let (n, d) = protos.shape();
    if n < 2 {
        return Err(Error::Graph {
            nodes: n,
            reason: "contrastive negatives need at least 2 prototypes",
        });
    }
    if temperature <= 0.0 {
        return Err(Error::config("train.ckd_temperature", "must be positive"));
    }
    let inv_t = 1.0 / temperature;
    let positive = cosine(z, z_hat).scale(inv_t);
    let unit = protos * inv_norms(protos).broadcast_cols(d);
    let sims = unit.matmul(unit.t()).scale(inv_t);
    let upper = Mat::from_fn(n, n, |r, c| if r < c { 1.0 } else { 0.0 });
    let negatives = (sims.exp() * protos.tape().constant(upper)).sum();
    Ok((positive.exp() + negatives).ln() - positive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_prototype_graph, nmp, DEFAULT_GAMMA};
    use crate::nets::ParamBlocks;
    use crate::rng::RngStream;
    use crate::tape::Tape;
    use rand::Rng;

    fn identity_embed(dim: usize) -> (EmbeddingNet, ParamBlocks) {
        let net = EmbeddingNet::new(vec![dim, dim], dim).unwrap();
        let mut params = ParamBlocks::new();
        params.insert("embed.0.weight", Mat::identity(dim, dim));
        params.insert("embed.0.bias", Mat::zeros(1, dim));
        (net, params)
    }

    #[test]
    fn prototype_is_class_mean() {
        let (net, params) = identity_embed(2);
        let t = Tape::new();
        let layers = net.0.bind(&t, &params, false);
        let x = t.constant(Mat::from_row_slice(3, 2, &[1.0, 3.0, 9.0, 9.0, 3.0, 5.0]));
        let p = compute_prototypes(&net, &layers, x, &[0, 1, 0], 2).unwrap().value();
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 4.0]);
        assert_eq!(p.row(1).iter().copied().collect::<Vec<_>>(), vec![9.0, 9.0]);
    }

    #[test]
    fn prototypes_invariant_to_support_order() {
        let net = EmbeddingNet::new(vec![3, 5, 4], 4).unwrap();
        let mut params = ParamBlocks::new();
        net.0.init(&mut RngStream::new(1, 0).rng(), &mut params);
        let mut rng = RngStream::new(2, 0).rng();
        let x = Mat::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = [0, 1, 0, 1];
        let perm = [2, 3, 0, 1];
        let xp = Mat::from_fn(4, 3, |r, c| x[(perm[r], c)]);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let t = Tape::new();
        let layers = net.0.bind(&t, &params, false);
        let a = compute_prototypes(&net, &layers, t.constant(x), &y, 2).unwrap().value();
        let b = compute_prototypes(&net, &layers, t.constant(xp), &yp, 2).unwrap().value();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn missing_class_is_an_error() {
        let (net, params) = identity_embed(2);
        let t = Tape::new();
        let layers = net.0.bind(&t, &params, false);
        let x = t.constant(Mat::zeros(2, 2));
        assert!(compute_prototypes(&net, &layers, x, &[0, 0], 2).is_err());
    }

    #[test]
    fn task_encoding_cases() {
        let t = Tape::new();
        let z = task_encoding(t.constant(Mat::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]))).value();
        assert_eq!(z, Mat::from_row_slice(1, 2, &[1.0, 1.0]));
        let one = Mat::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        assert_eq!(task_encoding(t.constant(one.clone())).value(), one);
    }

    #[test]
    fn contrastive_loss_direct_values() {
        let t = Tape::new();
        let z = t.row(&[1.0, 2.0]);
        // Two parallel prototypes: negative cosine 1.
        let parallel = t.constant(Mat::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 0.0]));
        let l = contrastive_loss(z, z, parallel, 1.0).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Orthogonal prototypes: negative cosine 0.
        let ortho = t.constant(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let l = contrastive_loss(z, z, ortho, 1.0).unwrap().item();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_monotone_in_positive() {
        let t = Tape::new();
        let protos = t.constant(Mat::from_row_slice(3, 2, &[1.0, 0.2, -0.3, 1.0, 0.5, -0.5]));
        let z = t.row(&[1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let angle = std::f64::consts::PI * (1.0 - k as f64 / 10.0);
            let z_hat = t.row(&[angle.cos(), angle.sin()]);
            let l = contrastive_loss(z, z_hat, protos, 1.0).unwrap().item();
            assert!(l < prev);
            assert!(l > 0.0);
            prev = l;
        }
    }

    #[test]
    fn zero_norm_is_guarded() {
        let t = Tape::new();
        let z = t.leaf(Mat::from_row_slice(1, 2, &[0.3, 0.1]));
        let z_hat = t.leaf(Mat::zeros(1, 2));
        let protos = t.leaf(Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        let l = contrastive_loss(z, z_hat, protos, 1.0).unwrap();
        assert!(l.item().is_finite());
        for g in t.grad_values(l, &[z, z_hat, protos]) {
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_nmp_weight_gives_zero_encoding() {
        let t = Tape::new();
        let mut rng = RngStream::new(6, 0).rng();
        let protos = t.constant(Mat::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0)));
        let kg = t.constant(Mat::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)));
        let u = t.constant(Mat::zeros(4, 1));
        let pg = build_prototype_graph(protos, u).unwrap();
        let (z_hat, protos_hat) =
            knowledge_enhanced_encoding(&pg, kg, u, t.constant(Mat::zeros(4, 4)), DEFAULT_GAMMA).unwrap();
        assert_eq!(z_hat.value(), Mat::zeros(1, 4));
        assert_eq!(protos_hat.value(), Mat::zeros(3, 4));
    }

    #[test]
    fn knowledge_encoding_matches_explicit_nmp_rows() {
        let t = Tape::new();
        let mut rng = RngStream::new(7, 0).rng();
        let mut rand = |r, c| t.constant(Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)));
        let (protos, kg, u_task, u_kg, w) = (rand(2, 3), rand(2, 3), rand(3, 1), rand(3, 1), rand(3, 3));
        let pg = build_prototype_graph(protos, u_task).unwrap();
        let (z_hat, _) = knowledge_enhanced_encoding(&pg, kg, u_kg, w, DEFAULT_GAMMA).unwrap();
        let sg = assemble_super_graph(&pg, kg, u_kg, DEFAULT_GAMMA).unwrap();
        let rows = nmp(sg.adjacency, sg.features, w, &[false, false, true, true]).unwrap().value();
        let want = (rows.row(0) + rows.row(1)) / 2.0;
        assert!((z_hat.value() - want).norm() < 1e-15);
    }
}
