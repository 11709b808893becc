//! Adaptive-moment outer optimizer.

use crate::nets::ParamBlocks;
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamBlocks,
    pub v: ParamBlocks,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamBlocks) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected update of every block in `params`.
    pub fn step(&mut self, params: &mut ParamBlocks, grads: &ParamBlocks, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.expect(name);
            let m = self.m.get_mut(name).expect("moment slot");
            let v = self.v.get_mut(name).expect("moment slot");
            update_block(p, g, m, v, cfg, c1, c2);
        }
    }
}

fn update_block(p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat, cfg: &AdamConfig, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamBlocks, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
