//! Task-conditioned gating of the task network initialization and the
//! inner-loop adaptation that starts from it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{cross_entropy, Layer, ParamBlocks, TaskNetwork};
use crate::tape::{Mat, Tape, Var};

/// Shapes of the gate parameters: layer `l` has `W_g` of `dim x widths[l]`
/// and `b_g` of `1 x widths[l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSpec {
    pub dim: usize,
    pub widths: Vec<usize>,
}

impl ModulationSpec {
    pub fn for_task_network(net: &TaskNetwork, dim: usize) -> Self {
        Self {
            dim,
            widths: (0..net.0.n_layers()).map(|l| net.0.out_width(l)).collect(),
        }
    }

    pub fn weight_name(l: usize) -> String {
        format!("mod.{l}.weight")
    }

    pub fn bias_name(l: usize) -> String {
        format!("mod.{l}.bias")
    }

    /// Fan-in uniform gate weights, zero gate biases.
    pub fn init(&self, rng: &mut ChaCha8Rng, params: &mut ParamBlocks) {
        let bound = 1.0 / (self.dim as f64).sqrt();
        for (l, &u) in self.widths.iter().enumerate() {
            let w = Mat::from_fn(self.dim, u, |_, _| rng.random_range(-bound..bound));
            params.insert(Self::weight_name(l), w);
            params.insert(Self::bias_name(l), Mat::zeros(1, u));
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, params: &ParamBlocks, leaves: bool) -> Vec<Layer<'t>> {
        let put = |m: &Mat| if leaves { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        (0..self.widths.len())
            .map(|l| Layer {
                weight: put(params.expect(&Self::weight_name(l))),
                bias: put(params.expect(&Self::bias_name(l))),
            })
            .collect()
    }
}

/// `σ(zᵀ W_g + b_g)` per task-network layer, each a `1 x u` row in (0, 1).
pub fn modulation_gates<'t>(z: Var<'t>, gate_params: &[Layer<'t>]) -> Result<Vec<Var<'t>>> {
    let d = z.shape().1;
    gate_params
        .iter()
        .map(|g| {
            if g.weight.shape().0 != d {
                return Err(Error::shape("modulation input dim", g.weight.shape().0, d));
            }
            Ok((z.matmul(g.weight) + g.bias).sigmoid())
        })
        .collect()
}

/// Scales output unit `i` of every layer (its weight row and bias entry)
/// by that layer's gate `i`.
pub fn modulate<'t>(theta0: &[Layer<'t>], gates: &[Var<'t>]) -> Result<Vec<Layer<'t>>> {
    if theta0.len() != gates.len() {
        return Err(Error::shape("modulation gates", theta0.len(), gates.len()));
    }
    theta0
        .iter()
        .zip(gates)
        .map(|(layer, &gate)| {
            let (out, inputs) = layer.weight.shape();
            if gate.shape() != (1, out) {
                return Err(Error::shape("gate width", out, gate.shape().1));
            }
            Ok(Layer {
                weight: layer.weight * gate.t().broadcast_cols(inputs),
                bias: layer.bias * gate,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoop {
    pub lr: f64,
    pub steps: usize,
    /// Treat inner gradients as constants (first-order approximation).
    pub first_order: bool,
}

/// `steps` plain gradient-descent updates on the support cross-entropy. The
/// result stays differentiable with respect to `start` and everything
/// upstream of it; with `first_order` the inner gradients are detached.
pub fn inner_adapt<'t>(
    net: &TaskNetwork,
    start: &[Layer<'t>],
    support_x: Var<'t>,
    support_y: &[usize],
    inner: InnerLoop,
) -> Result<Vec<Layer<'t>>> {
    if inner.lr <= 0.0 {
        return Err(Error::config("train.inner_lr", "must be positive"));
    }
    let tape = support_x.tape();
    let mut theta = start.to_vec();
    for step in 0..inner.steps {
        let loss = cross_entropy(net.0.forward(&theta, support_x), support_y)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                context: format!("inner-loop support loss at step {step}"),
            });
        }
        let vars = Layer::vars(&theta);
        let grads: Vec<Var<'t>> = if inner.first_order {
            tape.grad_values(loss, &vars)
                .into_iter()
                .map(|g| tape.constant(g))
                .collect()
        } else {
            tape.grad(loss, &vars)
        };
        let updated: Vec<Var<'t>> = vars
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| p - g.scale(inner.lr))
            .collect();
        theta = Layer::from_vars(&updated);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Activation;
    use crate::rng::RngStream;

    #[test]
    fn zero_gate_params_give_half() {
        let t = Tape::new();
        let z = t.row(&[0.3, -2.0]);
        let g = Layer {
            weight: t.constant(Mat::zeros(2, 3)),
            bias: t.constant(Mat::zeros(1, 3)),
        };
        let gates = modulation_gates(z, &[g]).unwrap();
        assert_eq!(gates[0].value(), Mat::from_element(1, 3, 0.5));
    }

    #[test]
    fn saturated_bias_gives_identity_gate() {
        let t = Tape::new();
        let z = t.row(&[0.3, -2.0]);
        let g = Layer {
            weight: t.constant(Mat::zeros(2, 3)),
            bias: t.constant(Mat::from_element(1, 3, 20.0)),
        };
        let gates = modulation_gates(z, &[g]).unwrap()[0].value();
        assert!(gates.iter().all(|&v| (1.0 - v).abs() < 1e-8));
    }

    #[test]
    fn hand_gate_value() {
        let t = Tape::new();
        let g = Layer {
            weight: t.constant(Mat::from_element(1, 1, 2.0)),
            bias: t.constant(Mat::from_element(1, 1, -1.0)),
        };
        let gate = modulation_gates(t.row(&[1.0]), &[g]).unwrap()[0].item();
        // σ(1) = 1 / (1 + e^-1)
        assert!((gate - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn gate_dim_mismatch() {
        let t = Tape::new();
        let g = Layer {
            weight: t.constant(Mat::zeros(3, 2)),
            bias: t.constant(Mat::zeros(1, 2)),
        };
        assert!(modulation_gates(t.row(&[1.0, 2.0]), &[g]).is_err());
    }

    #[test]
    fn modulate_scales_rows() {
        let t = Tape::new();
        let w = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Mat::from_row_slice(1, 2, &[5.0, 6.0]);
        let layer = Layer {
            weight: t.constant(w.clone()),
            bias: t.constant(b.clone()),
        };
        let out = modulate(&[layer], &[t.row(&[1.0, 0.5])]).unwrap();
        assert_eq!(out[0].weight.value(), Mat::from_row_slice(2, 2, &[1.0, 2.0, 1.5, 2.0]));
        assert_eq!(out[0].bias.value(), Mat::from_row_slice(1, 2, &[5.0, 3.0]));
        let half = modulate(&[layer], &[t.row(&[0.5, 0.5])]).unwrap();
        assert_eq!(half[0].weight.value(), w * 0.5);
        assert_eq!(half[0].bias.value(), b * 0.5);
        assert!(modulate(&[layer], &[t.row(&[0.5, 0.5, 0.5])]).is_err());
    }

    fn small_net() -> (TaskNetwork, ParamBlocks) {
        let net = TaskNetwork::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let mut params = ParamBlocks::new();
        net.0.init(&mut RngStream::new(3, 0).rng(), &mut params);
        (net, params)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (net, params) = small_net();
        let t = Tape::new();
        let start = net.0.bind(&t, &params, true);
        let x = t.constant(Mat::from_element(2, 3, 0.5));
        let inner = InnerLoop { lr: 0.1, steps: 0, first_order: false };
        let out = inner_adapt(&net, &start, x, &[0, 1], inner).unwrap();
        for (a, b) in out.iter().zip(&start) {
            assert_eq!(a.weight.value(), b.weight.value());
            assert_eq!(a.bias.value(), b.bias.value());
        }
    }

    #[test]
    fn scalar_quadratic_step() {
        // One gradient step on (θ - 3)^2 / 2 from θ = 0 with lr 0.1 lands at 0.3.
        let t = Tape::new();
        let theta = t.leaf(Mat::from_element(1, 1, 0.0));
        let diff = theta.offset(-3.0);
        let loss = (diff * diff).scale(0.5).sum();
        let g = t.grad(loss, &[theta])[0];
        assert!(((theta - g.scale(0.1)).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn saturated_fit_barely_moves() {
        let net = TaskNetwork::new(vec![2, 2], Activation::Relu).unwrap();
        let mut params = ParamBlocks::new();
        params.insert("task.0.weight", Mat::identity(2, 2) * 100.0);
        params.insert("task.0.bias", Mat::zeros(1, 2));
        let t = Tape::new();
        let start = net.0.bind(&t, &params, true);
        let x = t.constant(Mat::identity(2, 2));
        let inner = InnerLoop { lr: 0.5, steps: 3, first_order: false };
        let out = inner_adapt(&net, &start, x, &[0, 1], inner).unwrap();
        assert!((out[0].weight.value() - params.expect("task.0.weight")).norm() < 1e-40);
    }

    #[test]
    fn inner_adaptation_reduces_support_loss() {
        let (net, params) = small_net();
        let t = Tape::new();
        let start = net.0.bind(&t, &params, true);
        let x = t.constant(Mat::from_row_slice(2, 3, &[1.0, 0.0, -1.0, -1.0, 0.5, 1.0]));
        let before = cross_entropy(net.0.forward(&start, x), &[0, 1]).unwrap().item();
        let inner = InnerLoop { lr: 0.5, steps: 5, first_order: false };
        let out = inner_adapt(&net, &start, x, &[0, 1], inner).unwrap();
        let after = cross_entropy(net.0.forward(&out, x), &[0, 1]).unwrap().item();
        assert!(after < before);
    }
}
