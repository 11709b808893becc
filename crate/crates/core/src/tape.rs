//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every backward rule is itself expressed with tape operations, so the
//! gradients returned by [`Tape::grad`] are ordinary [`Var`]s that can be
//! differentiated again. This is what lets the outer meta-objective
//! differentiate through the inner-loop gradient steps.
//!
//! Values never require gradients unless they descend from a leaf created
//! with [`Tape::leaf`]. [`Var::detach`] is the stop-gradient marker: the
//! value passes through unchanged and no adjoint flows back.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Powf(usize, f64),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    Slice { src: usize, r0: usize, c0: usize },
    Pad { src: usize, r0: usize, c0: usize },
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Reshape(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Arena of recorded operations. Nodes are appended in evaluation order, so
/// the index order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.constant(Mat::from_row_slice(1, values.len(), values))
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var<'_> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(value, op, req)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Var<'_> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value),
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        self.push(value, op, req)
    }

    /// Gradients of a scalar `output` with respect to `wrt`, recorded on the
    /// tape so they can be differentiated again. Inputs that `output` does
    /// not depend on get a zero constant.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), (1, 1), "grad requires a scalar output");
        let n = output.id + 1;

        // Only nodes downstream of some `wrt` entry carry a useful adjoint.
        let mut relevant = vec![false; n];
        for v in wrt {
            if v.id < n {
                relevant[v.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if relevant[i] || !nodes[i].requires_grad {
                    continue;
                }
                relevant[i] = parents(&nodes[i].op).iter().any(|&p| relevant[p]);
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[output.id] {
            adj[output.id] = Some(self.constant(Mat::from_element(1, 1, 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let y = Var { tape: self, id: i };
            let mut send = |p: usize, contrib: &dyn Fn() -> Var<'t>| {
                if !relevant[p] {
                    return;
                }
                let c = contrib();
                adj[p] = Some(match adj[p] {
                    Some(prev) => prev + c,
                    None => c,
                });
            };
            let var = |id: usize| Var { tape: self, id };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    send(a, &|| g);
                    send(b, &|| g);
                }
                Op::Sub(a, b) => {
                    send(a, &|| g);
                    send(b, &|| -g);
                }
                Op::Mul(a, b) => {
                    send(a, &|| g * var(b));
                    send(b, &|| g * var(a));
                }
                Op::Scale(a, f) => send(a, &|| g.scale(f)),
                Op::Offset(a) => send(a, &|| g),
                Op::MatMul(a, b) => {
                    send(a, &|| g.matmul(var(b).t()));
                    send(b, &|| var(a).t().matmul(g));
                }
                Op::Transpose(a) => send(a, &|| g.t()),
                Op::Tanh(a) => send(a, &|| g * (y * y).scale(-1.0).offset(1.0)),
                Op::Sigmoid(a) => send(a, &|| g * y * y.scale(-1.0).offset(1.0)),
                Op::Relu(a) => send(a, &|| {
                    let mask = var(a).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    g * self.constant(mask)
                }),
                Op::Exp(a) => send(a, &|| g * y),
                Op::Log(a) => send(a, &|| g * var(a).powf(-1.0)),
                Op::Abs(a) => send(a, &|| {
                    let sign = var(a).value().map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    g * self.constant(sign)
                }),
                Op::Powf(a, p) => send(a, &|| g * var(a).powf(p - 1.0).scale(p)),
                Op::SumRows(a) => send(a, &|| g.broadcast_rows(var(a).shape().0)),
                Op::SumCols(a) => send(a, &|| g.broadcast_cols(var(a).shape().1)),
                Op::BroadcastRows(a) => send(a, &|| g.sum_rows()),
                Op::BroadcastCols(a) => send(a, &|| g.sum_cols()),
                Op::Slice { src, r0, c0 } => {
                    let (rows, cols) = var(src).shape();
                    send(src, &|| g.pad(r0, c0, rows, cols));
                }
                Op::Pad { src, r0, c0 } => {
                    let (rows, cols) = var(src).shape();
                    send(src, &|| g.slice(r0, c0, rows, cols));
                }
                Op::GatherRows(a, ref idx) => {
                    let rows = var(a).shape().0;
                    send(a, &|| g.scatter_rows(idx.clone(), rows));
                }
                Op::ScatterRows(a, ref idx) => send(a, &|| g.gather_rows_rc(idx.clone())),
                Op::Reshape(a) => {
                    let (rows, cols) = var(a).shape();
                    send(a, &|| g.reshape(rows, cols));
                }
                Op::ConcatRows(a, b) => {
                    let (ra, ca) = var(a).shape();
                    let rb = var(b).shape().0;
                    send(a, &|| g.slice(0, 0, ra, ca));
                    send(b, &|| g.slice(ra, 0, rb, ca));
                }
                Op::ConcatCols(a, b) => {
                    let (ra, ca) = var(a).shape();
                    let cb = var(b).shape().1;
                    send(a, &|| g.slice(0, 0, ra, ca));
                    send(b, &|| g.slice(0, ca, ra, cb));
                }
            }
        }
        wrt.iter()
            .map(|v| match adj.get(v.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = v.shape();
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    /// Gradient values only. Every node recorded while computing them is
    /// discarded afterwards, so the tape is left exactly as it was.
    pub fn grad_values<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Mat> {
        let mark = self.len();
        let grads = self.grad(output, wrt);
        let values = grads.iter().map(|g| g.value()).collect();
        self.nodes.borrow_mut().truncate(mark);
        values
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::ConcatRows(a, b)
        | Op::ConcatCols(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Transpose(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Powf(a, _)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::Reshape(a)
        | Op::GatherRows(a, _)
        | Op::ScatterRows(a, _) => vec![a],
        Op::Slice { src, .. } | Op::Pad { src, .. } => vec![src],
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Mat {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.with_value(|m| {
            assert_eq!(m.shape(), (1, 1), "item() on a non-scalar");
            m[(0, 0)]
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|m| m.shape())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Stop-gradient: same value, no adjoint flows back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, Op::MatMul(self.id, other.id), |a, b| {
                assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
                a * b
            })
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn scale(self, f: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, f), |a| a * f)
    }

    /// Adds a constant to every entry.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Offset(self.id), |a| a.map(|v| v + c))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Powf(self.id, p), |a| a.map(|v| v.powf(p)))
    }

    /// Column sums as a 1 x cols row.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |a| {
            Mat::from_fn(1, a.ncols(), |_, c| a.column(c).iter().sum())
        })
    }

    /// Row sums as a rows x 1 column.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            Mat::from_fn(a.nrows(), 1, |r, _| a.row(r).iter().sum())
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.sum_cols().sum_rows()
    }

    /// Repeats a 1 x c row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastRows(self.id), |a| {
            assert_eq!(a.nrows(), 1, "broadcast_rows expects a row");
            Mat::from_fn(n, a.ncols(), |_, c| a[(0, c)])
        })
    }

    /// Repeats an r x 1 column `n` times.
    pub fn broadcast_cols(self, n: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastCols(self.id), |a| {
            assert_eq!(a.ncols(), 1, "broadcast_cols expects a column");
            Mat::from_fn(a.nrows(), n, |r, _| a[(r, 0)])
        })
    }

    /// Broadcasts a 1x1 value to `rows x cols`.
    pub fn expand(self, rows: usize, cols: usize) -> Var<'t> {
        self.broadcast_rows(rows).broadcast_cols(cols)
    }

    pub fn slice(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Slice { src: self.id, r0, c0 }, |a| {
                a.view((r0, c0), (rows, cols)).into_owned()
            })
    }

    pub fn rows(self, r0: usize, rows: usize) -> Var<'t> {
        let cols = self.shape().1;
        self.slice(r0, 0, rows, cols)
    }

    /// Embeds `self` into a zero matrix of shape `rows x cols` at `(r0, c0)`.
    pub fn pad(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Pad { src: self.id, r0, c0 }, |a| {
                let mut out = Mat::zeros(rows, cols);
                out.view_mut((r0, c0), a.shape()).copy_from(a);
                out
            })
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        self.gather_rows_rc(Rc::from(idx))
    }

    fn gather_rows_rc(self, idx: Rc<[usize]>) -> Var<'t> {
        let op = Op::GatherRows(self.id, idx.clone());
        self.tape.unary(self.id, op, |a| {
            Mat::from_fn(idx.len(), a.ncols(), |r, c| a[(idx[r], c)])
        })
    }

    /// Adjoint of [`Var::gather_rows`]: row `r` of `self` is added into row
    /// `idx[r]` of a zero `rows`-row matrix.
    fn scatter_rows(self, idx: Rc<[usize]>, rows: usize) -> Var<'t> {
        let op = Op::ScatterRows(self.id, idx.clone());
        self.tape.unary(self.id, op, |a| {
            let mut out = Mat::zeros(rows, a.ncols());
            for (r, &target) in idx.iter().enumerate() {
                for c in 0..a.ncols() {
                    out[(target, c)] += a[(r, c)];
                }
            }
            out
        })
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Reshape(self.id), |a| {
            assert_eq!(a.len(), rows * cols, "reshape size mismatch");
            let src_cols = a.ncols();
            Mat::from_fn(rows, cols, |r, c| {
                let flat = r * cols + c;
                a[(flat / src_cols, flat % src_cols)]
            })
        })
    }

    /// Stacks `self` above `other`. Entries are copied, not summed.
    pub fn concat_rows(self, other: Var<'t>) -> Var<'t> {
        let op = Op::ConcatRows(self.id, other.id);
        self.tape.binary(self.id, other.id, op, |a, b| {
            assert_eq!(a.ncols(), b.ncols(), "concat_rows column mismatch");
            let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
            out.view_mut((0, 0), a.shape()).copy_from(a);
            out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
            out
        })
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        let op = Op::ConcatCols(self.id, other.id);
        self.tape.binary(self.id, other.id, op, |a, b| {
            assert_eq!(a.nrows(), b.nrows(), "concat_cols row mismatch");
            let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
            out.view_mut((0, 0), a.shape()).copy_from(a);
            out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
            out
        })
    }

    /// Row-wise log-softmax with max subtraction. The shift is detached; the
    /// result is shift-invariant so the gradient is unaffected.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let (rows, cols) = self.shape();
        let max = self.with_value(|m| {
            Mat::from_fn(rows, 1, |r, _| {
                m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
        });
        let shifted = self - self.tape.constant(max).broadcast_cols(cols);
        let lse = shifted.exp().sum_cols().ln();
        shifted - lse.broadcast_cols(cols)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                self.tape
                    .binary(self.id, rhs.id, Op::$variant(self.id, rhs.id), |a, b| {
                        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
                        $f(a, b)
                    })
            }
        }
    };
}

binop!(Add, add, Add, |a: &Mat, b: &Mat| a + b);
binop!(Sub, sub, Sub, |a: &Mat, b: &Mat| a - b);
binop!(Mul, mul, Mul, |a: &Mat, b: &Mat| a.component_mul(b));

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
