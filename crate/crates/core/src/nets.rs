//! Embedding network, task network and the parameter containers they share.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

/// Ordered collection of named parameter matrices.
///
/// The flattened view concatenates blocks in insertion order, each block in
/// row-major order, so block offsets partition the flat vector exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBlocks {
    blocks: Vec<(String, Mat)>,
}

impl ParamBlocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        match self.blocks.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = value,
            None => self.blocks.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.blocks
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.blocks.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.blocks.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|(n, v)| (n.clone(), Mat::zeros(v.nrows(), v.ncols())))
                .collect(),
        }
    }

    /// `(name, offset, len)` of every block in the flat view.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|(n, v)| {
                let entry = (n.clone(), offset, v.len());
                offset += v.len();
                entry
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, v) in &self.blocks {
            for r in 0..v.nrows() {
                out.extend(v.row(r).iter());
            }
        }
        out
    }

    /// Inverse of [`ParamBlocks::flatten`], using `self` for the shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("unflatten", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|(n, v)| {
                let (r, c) = v.shape();
                let m = Mat::from_row_slice(r, c, &flat[offset..offset + r * c]);
                offset += r * c;
                (n.clone(), m)
            })
            .collect();
        Ok(Self { blocks })
    }

    /// The blocks whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<'t>(&self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// One dense layer bound to a tape. `weight` is `out x in`: row `i` holds
/// the incoming weights of output unit `i`. `bias` is `1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct Layer<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Layer<'t> {
    pub fn vars(layers: &[Layer<'t>]) -> Vec<Var<'t>> {
        layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn from_vars(vars: &[Var<'t>]) -> Vec<Layer<'t>> {
        vars.chunks(2)
            .map(|c| Layer {
                weight: c[0],
                bias: c[1],
            })
            .collect()
    }
}

/// Fully connected network described by its layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(
                format!("{prefix} widths"),
                "need at least input and output width, all positive",
            ));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            widths,
            activation,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Output width of layer `l`.
    pub fn out_width(&self, l: usize) -> usize {
        self.widths[l + 1]
    }

    pub fn weight_name(&self, l: usize) -> String {
        format!("{}.{}.weight", self.prefix, l)
    }

    pub fn bias_name(&self, l: usize) -> String {
        format!("{}.{}.bias", self.prefix, l)
    }

    /// Scaled uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    pub fn init(&self, rng: &mut ChaCha8Rng, params: &mut ParamBlocks) {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
            let b = Mat::from_fn(1, fan_out, |_, _| rng.random_range(-bound..bound));
            params.insert(self.weight_name(l), w);
            params.insert(self.bias_name(l), b);
        }
    }

    pub fn check_params(&self, params: &ParamBlocks) -> Result<()> {
        for l in 0..self.n_layers() {
            let want_w = (self.widths[l + 1], self.widths[l]);
            let want_b = (1, self.widths[l + 1]);
            for (name, want) in [(self.weight_name(l), want_w), (self.bias_name(l), want_b)] {
                match params.get(&name) {
                    Some(m) if m.shape() == want => {}
                    Some(m) => {
                        return Err(Error::shape("network parameters", format!("{name} {want:?}"), format!("{:?}", m.shape())))
                    }
                    None => return Err(Error::Invalid(format!("missing parameter block {name}"))),
                }
            }
        }
        Ok(())
    }

    /// Puts this network's blocks on the tape, as leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, params: &ParamBlocks, leaves: bool) -> Vec<Layer<'t>> {
        let put = |m: &Mat| {
            if leaves {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        (0..self.n_layers())
            .map(|l| Layer {
                weight: put(params.expect(&self.weight_name(l))),
                bias: put(params.expect(&self.bias_name(l))),
            })
            .collect()
    }

    /// Row-batched forward pass: `x` is `n x in`, result is `n x out`. The
    /// activation sits between layers, never after the last one.
    pub fn forward<'t>(&self, layers: &[Layer<'t>], x: Var<'t>) -> Var<'t> {
        let n = x.shape().0;
        let mut h = x;
        for (l, layer) in layers.iter().enumerate() {
            h = h.matmul(layer.weight.t()) + layer.bias.broadcast_rows(n);
            if l + 1 < layers.len() {
                h = self.activation.apply(h);
            }
        }
        h
    }
}

/// Feature extractor B: inputs to `d`-dimensional embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet(pub Mlp);

impl EmbeddingNet {
    /// `widths` runs from the input dimension to the embedding dimension,
    /// which must equal the knowledge graph's node dimension.
    pub fn new(widths: Vec<usize>, node_dim: usize) -> Result<Self> {
        let mlp = Mlp::new("embed", widths, Activation::Tanh)?;
        if mlp.output_dim() != node_dim {
            return Err(Error::shape(
                "embedding output vs knowledge graph node dim",
                node_dim,
                mlp.output_dim(),
            ));
        }
        Ok(Self(mlp))
    }

    pub fn dim(&self) -> usize {
        self.0.output_dim()
    }

    /// Embeds a single input, outside any differentiated computation.
    pub fn embed(&self, params: &ParamBlocks, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.0.input_dim() {
            return Err(Error::shape("embed input", self.0.input_dim(), x.len()));
        }
        let tape = Tape::new();
        let layers = self.0.bind(&tape, params, false);
        let out = self.0.forward(&layers, tape.row(x));
        Ok(out.value().iter().copied().collect())
    }
}

/// Task network f with initialization θ₀; the last layer emits N logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskNetwork(pub Mlp);

impl TaskNetwork {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        Ok(Self(Mlp::new("task", widths, activation)?))
    }

    pub fn n_way(&self) -> usize {
        self.0.output_dim()
    }

    /// Logits for a single input under arbitrary parameters shaped like θ₀.
    pub fn forward_task(&self, params: &ParamBlocks, x: &[f64]) -> Result<Vec<f64>> {
        self.0.check_params(params)?;
        if x.len() != self.0.input_dim() {
            return Err(Error::shape("task network input", self.0.input_dim(), x.len()));
        }
        let tape = Tape::new();
        let layers = self.0.bind(&tape, params, false);
        let out = self.0.forward(&layers, tape.row(x));
        Ok(out.value().iter().copied().collect())
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label {
            label: bad,
            n_way: classes,
        });
    }
    let mut onehot = Mat::zeros(n, classes);
    for (r, &y) in labels.iter().enumerate() {
        onehot[(r, y)] = 1.0;
    }
    let tape = logits.tape();
    let picked = (logits.log_softmax_rows() * tape.constant(onehot)).sum();
    Ok(picked.scale(-1.0 / n as f64))
}

/// Fraction of rows whose argmax (first index on ties) equals the label.
pub fn accuracy(logits: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}
