#![allow(dead_code)]

use caml::episodes::{make_task_distribution, DistributionConfig, Episode, Split, TaskDistribution};
use caml::meta::{ModelConfig, TrainConfig};
use caml::modulation::ModulationSpec;
use caml::nets::{cross_entropy, EmbeddingNet, ParamBlocks, TaskNetwork};
use caml::rng::{streams, RngStream};
use caml::tape::{Mat, Tape, Var};

/// A few seconds of training at most.
pub fn tiny() -> (DistributionConfig, TrainConfig, ModelConfig) {
    let dist = DistributionConfig {
        input_dim: 6,
        latent_dim: 3,
        n_modes: 2,
        n_datasets: 2,
        classes_per_dataset: 10,
        ..Default::default()
    };
    let train = TrainConfig {
        n_way: 3,
        k_shot: 1,
        query_per_class: 4,
        meta_batch: 2,
        inner_steps: 2,
        kg_nodes: 3,
        kg_dim: 8,
        iterations: 10,
        ..Default::default()
    };
    let model = ModelConfig {
        task_hidden: vec![10],
        embed_hidden: vec![12],
        ..Default::default()
    };
    (dist, train, model)
}

pub fn distribution(cfg: &DistributionConfig, train: &TrainConfig) -> TaskDistribution {
    make_task_distribution(cfg, train.n_way, RngStream::new(train.seed, streams::DISTRIBUTION)).unwrap()
}

/// Bit patterns of every value, block by block.
pub fn bits(p: &ParamBlocks) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

/// Textbook adaptive-moment state for the reference trainers below.
pub struct RefAdam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl RefAdam {
    pub fn new(params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.nrows(), p.ncols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bias1 = 1.0 - b1.powi(self.t);
        let bias2 = 1.0 - b2.powi(self.t);
        for k in 0..params.len() {
            for i in 0..params[k].len() {
                let g = grads[k][i];
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g;
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g * g;
                let m_hat = self.m[k][i] / bias1;
                let v_hat = self.v[k][i] / bias2;
                params[k][i] -= cfg.outer_lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn forward<'t>(layers: &[(Var<'t>, Var<'t>)], x: Var<'t>, relu: bool) -> Var<'t> {
    let n = x.shape().0;
    let mut h = x;
    for (l, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(w.t()) + b.broadcast_rows(n);
        if l + 1 < layers.len() {
            h = if relu { h.relu() } else { h.tanh() };
        }
    }
    h
}

fn pairs<'t>(v: &[Var<'t>]) -> Vec<(Var<'t>, Var<'t>)> {
    v.chunks(2).map(|c| (c[0], c[1])).collect()
}

fn train_episode(dist: &TaskDistribution, cfg: &TrainConfig, t: u64, b: usize) -> Episode {
    let stream = RngStream::new(cfg.seed, streams::TRAIN_EPISODES + t * cfg.meta_batch as u64 + b as u64);
    dist.sample_episode(Split::Train, cfg.n_way, cfg.k_shot, cfg.query_per_class, stream)
        .unwrap()
}

/// Plain second-order MAML over the task network only. Returns the task
/// network blocks after every iteration.
pub fn reference_maml(dist: &TaskDistribution, cfg: &TrainConfig, task: &TaskNetwork, iterations: u64) -> Vec<Vec<Mat>> {
    let mut init = ParamBlocks::new();
    task.0.init(&mut RngStream::new(cfg.seed, streams::INIT).rng(), &mut init);
    let mut theta: Vec<Mat> = init.iter().map(|(_, m)| m.clone()).collect();
    let mut adam = RefAdam::new(&theta);
    let relu = matches!(task.0.activation, caml::nets::Activation::Relu);
    let mut history = Vec::new();
    for t in 0..iterations {
        let mut sum: Option<Vec<Mat>> = None;
        for b in 0..cfg.meta_batch {
            let ep = train_episode(dist, cfg, t, b);
            let tape = Tape::new();
            let leaves: Vec<Var> = theta.iter().map(|m| tape.leaf(m.clone())).collect();
            let sx = tape.constant(ep.support_x());
            let mut fast = leaves.clone();
            for _ in 0..cfg.inner_steps {
                let loss = cross_entropy(forward(&pairs(&fast), sx, relu), &ep.support_y()).unwrap();
                let g = tape.grad(loss, &fast);
                fast = fast.iter().zip(&g).map(|(&p, &g)| p - g.scale(cfg.inner_lr)).collect();
            }
            let q = cross_entropy(forward(&pairs(&fast), tape.constant(ep.query_x()), relu), &ep.query_y()).unwrap();
            let g = tape.grad_values(q, &leaves);
            sum = Some(match sum {
                None => g,
                Some(s) => s.into_iter().zip(g).map(|(a, b)| a + b).collect(),
            });
        }
        let n = cfg.meta_batch as f64;
        let grads: Vec<Mat> = sum.unwrap().into_iter().map(|g| g / n).collect();
        adam.step(&mut theta, &grads, cfg);
        history.push(theta.clone());
    }
    history
}

/// MAML with sigmoid gates computed from the mean support embedding.
/// Returns task, embedding and gate blocks after every iteration, in that
/// order.
pub fn reference_mumo(
    dist: &TaskDistribution,
    cfg: &TrainConfig,
    task: &TaskNetwork,
    embed: &EmbeddingNet,
    gates: &ModulationSpec,
    iterations: u64,
) -> Vec<Vec<Mat>> {
    let mut rng = RngStream::new(cfg.seed, streams::INIT).rng();
    let mut init = ParamBlocks::new();
    task.0.init(&mut rng, &mut init);
    embed.0.init(&mut rng, &mut init);
    gates.init(&mut rng, &mut init);
    let mut params: Vec<Mat> = init.iter().map(|(_, m)| m.clone()).collect();
    let n_task = 2 * task.0.n_layers();
    let n_embed = 2 * embed.0.n_layers();
    let relu = matches!(task.0.activation, caml::nets::Activation::Relu);
    let mut adam = RefAdam::new(&params);
    let mut history = Vec::new();
    for t in 0..iterations {
        let mut sum: Option<Vec<Mat>> = None;
        for b in 0..cfg.meta_batch {
            let ep = train_episode(dist, cfg, t, b);
            let tape = Tape::new();
            let leaves: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
            let (theta0, rest) = leaves.split_at(n_task);
            let (phi, gamma) = rest.split_at(n_embed);
            let sx = tape.constant(ep.support_x());
            let sy = ep.support_y();

            // One-shot support: each class prototype is its single embedding.
            let e = forward(&pairs(phi), sx, false);
            let order: Vec<usize> = (0..cfg.n_way).map(|c| sy.iter().position(|&y| y == c).unwrap()).collect();
            let protos = e.gather_rows(&order);
            let z = protos.sum_rows().scale(1.0 / cfg.n_way as f64);

            let mut fast = Vec::new();
            for ((w, bias), (gw, gb)) in pairs(theta0).into_iter().zip(pairs(gamma)) {
                let g = (z.matmul(gw) + gb).sigmoid();
                fast.push(w * g.t().broadcast_cols(w.shape().1));
                fast.push(bias * g);
            }
            for _ in 0..cfg.inner_steps {
                let loss = cross_entropy(forward(&pairs(&fast), sx, relu), &sy).unwrap();
                let g = tape.grad(loss, &fast);
                fast = fast.iter().zip(&g).map(|(&p, &g)| p - g.scale(cfg.inner_lr)).collect();
            }
            let q = cross_entropy(forward(&pairs(&fast), tape.constant(ep.query_x()), relu), &ep.query_y()).unwrap();
            let g = tape.grad_values(q, &leaves);
            sum = Some(match sum {
                None => g,
                Some(s) => s.into_iter().zip(g).map(|(a, b)| a + b).collect(),
            });
        }
        let n = cfg.meta_batch as f64;
        let grads: Vec<Mat> = sum.unwrap().into_iter().map(|g| g / n).collect();
        adam.step(&mut params, &grads, cfg);
        history.push(params.clone());
    }
    history
}

pub fn mats_bits(ms: &[Mat]) -> Vec<u64> {
    ms.iter().flat_map(|m| {
        let mut out = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push(m[(r, c)].to_bits());
            }
        }
        out
    })
    .collect()
}

pub fn bits_mat(m: &Mat) -> Vec<u64> {
    mats_bits(std::slice::from_ref(m))
}
