//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! Every node holds a dense [`Tensor`] value. Nodes are appended in
//! evaluation order, so parents always precede children and a single reverse
//! sweep computes all adjoints. Leaves are either trainable (`param`) or
//! constant; a node requires a gradient only if some ancestor is trainable,
//! and the backward sweep skips everything else.
//!
//! ```
//! use rfo::tape::Tape;
//! use rfo::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::{self, broadcast_apply, gemm, Broadcast, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: argument {value} outside the open domain")]
    Domain { op: &'static str, value: f64 },
    #[error("variable belongs to a different or cleared tape")]
    ForeignVar,
    #[error("backward root must be 1x1, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    #[inline]
    pub fn index(&self) -> usize {
        self.idx
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    SquareNorm(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Atanh(usize),
    /// Keeps the sigmoid of the input for the backward pass.
    Silu {
        x: usize,
        sig: Tensor,
    },
    Sin(usize),
    Cos(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// An append-only computation record. Confined to one thread.
#[derive(Debug)]
pub struct Tape {
    id: std::cell::Cell<u64>,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, zero when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols))
    }

    /// `None` when no path from `v` to the root was traversed.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.idx).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: std::cell::Cell::new(fresh_id()),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Drops every node. Vars created before the reset are rejected afterwards.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.id.set(fresh_id());
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        let (rows, cols) = value.shape();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id.get(),
            idx,
            rows,
            cols,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id.get() || v.idx >= self.nodes.borrow().len() {
            return Err(TapeError::ForeignVar);
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.idx].value.clone())
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.check(v)?;
        if v.shape() != (1, 1) {
            return Err(TapeError::Shape {
                op: "scalar",
                lhs: v.shape(),
                rhs: (1, 1),
            });
        }
        Ok(self.nodes.borrow()[v.idx].value.item())
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R> {
        self.check(v)?;
        Ok(f(&self.nodes.borrow()[v.idx].value))
    }

    /// Whether any trainable leaf reaches `v`.
    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.idx].requires_grad)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        ctor: fn(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mode = Broadcast::resolve(a.shape(), b.shape()).ok_or(TapeError::Shape {
            op: name,
            lhs: a.shape(),
            rhs: b.shape(),
        })?;
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_apply(&nodes[a.idx].value, &nodes[b.idx].value, mode, f)
        };
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(ctor(a.idx, b.idx, mode), value, rg))
    }

    /// `a + b`, with `b` broadcast over rows, columns, or as a scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if let Some(&z) = self.nodes.borrow()[b.idx].value.data().iter().find(|v| **v == 0.0) {
            return Err(TapeError::Domain { op: "div", value: z });
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    fn unary(
        &self,
        x: Var,
        op: Op,
        domain: Option<(&'static str, fn(f64) -> bool)>,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.idx].value;
            if let Some((name, ok)) = domain {
                if let Some(&bad) = v.data().iter().find(|a| !ok(**a)) {
                    return Err(TapeError::Domain { op: name, value: bad });
                }
            }
            v.map(f)
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(op, value, rg))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x.idx), None, |a| -a)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x.idx, c), None, |a| a * c)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Offset(x.idx), None, |a| a + c)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(TapeError::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            gemm(&nodes[a.idx].value, false, &nodes[b.idx].value, false)
        };
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(Op::MatMul(a.idx, b.idx), value, rg))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.nodes.borrow()[x.idx].value.sum());
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::Sum(x.idx), value, rg))
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.nodes.borrow()[x.idx].value.mean());
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::Mean(x.idx), value, rg))
    }

    /// Row-wise sum, `r x c -> r x 1`.
    pub fn row_sum(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = tensor::row_sum(&self.nodes.borrow()[x.idx].value);
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::RowSum(x.idx), value, rg))
    }

    /// Row-wise squared Euclidean norm, `r x c -> r x 1`.
    pub fn square_norm(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.idx].value;
            let mut out = Tensor::zeros(v.rows(), 1);
            for r in 0..v.rows() {
                out.data_mut()[r] = v.row_slice(r).iter().map(|a| a * a).sum();
            }
            out
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::SquareNorm(x.idx), value, rg))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.idx), None, |a| a * a)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x.idx), Some(("sqrt", |a| a > 0.0)), f64::sqrt)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.idx), None, f64::exp)
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x.idx), Some(("ln", |a| a > 0.0)), f64::ln)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x.idx), None, f64::tanh)
    }

    /// Callers shrink saturated inputs (e.g. by `1 - 1e-6`) before calling.
    pub fn atanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Atanh(x.idx), Some(("atanh", |a| a.abs() < 1.0)), f64::atanh)
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (value, sig) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.idx].value;
            let sig = v.map(tensor::sigmoid);
            (v.zip_map(&sig, |a, s| a * s), sig)
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::Silu { x: x.idx, sig }, value, rg))
    }

    pub fn sin(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x.idx), None, f64::sin)
    }

    pub fn cos(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x.idx), None, f64::cos)
    }

    /// Row-wise layer normalization with `1 x c` scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        for p in [gamma, beta] {
            if p.shape() != (1, x.cols) {
                return Err(TapeError::Shape {
                    op: "layer_norm",
                    lhs: x.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            tensor::layer_norm(&nodes[x.idx].value, &nodes[gamma.idx].value, &nodes[beta.idx].value)
        };
        let rg = self.rg(&[x.idx, gamma.idx, beta.idx]);
        let op = Op::LayerNorm {
            x: x.idx,
            gamma: gamma.idx,
            beta: beta.idx,
            xhat,
            inv_std,
        };
        Ok(self.push(op, value, rg))
    }

    /// Column-wise concatenation of vars with equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TapeError::Shape {
            op: "concat",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        for &p in parts {
            self.check(p)?;
            if p.rows != first.rows {
                return Err(TapeError::Shape {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            tensor::concat_cols(&vals)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::Concat(ids), value, rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        if start >= end || end > x.cols {
            return Err(TapeError::Shape {
                op: "slice_cols",
                lhs: x.shape(),
                rhs: (start, end),
            });
        }
        let value = tensor::slice_cols(&self.nodes.borrow()[x.idx].value, start, end);
        let rg = self.rg(&[x.idx]);
        Ok(self.push(Op::SliceCols { x: x.idx, start }, value, rg))
    }

    /// Componentwise clamp to `[lo, hi]`. The backward pass lets the adjoint
    /// through inside the closed interval and blocks it outside.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TapeError::Domain { op: "clamp", value: lo });
        }
        self.unary(x, Op::Clamp { x: x.idx, lo, hi }, None, |a| a.clamp(lo, hi))
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if root.shape() != (1, 1) {
            return Err(TapeError::NonScalarRoot(root.rows, root.cols));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adj[root.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=root.idx).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id.get(),
            adj,
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let y = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b, mode) => {
            accumulate(nodes, adj, *a, g.clone());
            if nodes[*b].requires_grad {
                accumulate(nodes, adj, *b, mode.reduce(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b, mode) => {
            accumulate(nodes, adj, *a, g.clone());
            if nodes[*b].requires_grad {
                accumulate(nodes, adj, *b, mode.reduce(&g.map(|v| -v), val(*b).shape()));
            }
        }
        Op::Mul(a, b, mode) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, adj, *a, broadcast_apply(g, val(*b), *mode, |gv, bv| gv * bv));
            }
            if nodes[*b].requires_grad {
                let full = g.zip_map(val(*a), |gv, av| gv * av);
                accumulate(nodes, adj, *b, mode.reduce(&full, val(*b).shape()));
            }
        }
        Op::Div(a, b, mode) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, adj, *a, broadcast_apply(g, val(*b), *mode, |gv, bv| gv / bv));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -y / b
                let full = broadcast_apply(&g.zip_map(y, |gv, yv| -gv * yv), val(*b), *mode, |t, bv| t / bv);
                accumulate(nodes, adj, *b, mode.reduce(&full, val(*b).shape()));
            }
        }
        Op::Neg(x) => accumulate(nodes, adj, *x, g.map(|v| -v)),
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(nodes, adj, *x, g.map(|v| v * c))
        }
        Op::Offset(x) => accumulate(nodes, adj, *x, g.clone()),
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, adj, *a, gemm(g, false, val(*b), true));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, adj, *b, gemm(val(*a), true, g, false));
            }
        }
        Op::Sum(x) => {
            let (r, c) = val(*x).shape();
            accumulate(nodes, adj, *x, Tensor::filled(r, c, g.item()));
        }
        Op::Mean(x) => {
            let (r, c) = val(*x).shape();
            accumulate(nodes, adj, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::RowSum(x) => {
            let (r, c) = val(*x).shape();
            let mut out = Tensor::zeros(r, c);
            for row in 0..r {
                for col in 0..c {
                    out.set(row, col, g.data()[row]);
                }
            }
            accumulate(nodes, adj, *x, out);
        }
        Op::SquareNorm(x) => {
            let xv = val(*x);
            let (r, c) = xv.shape();
            let mut out = Tensor::zeros(r, c);
            for row in 0..r {
                for col in 0..c {
                    out.set(row, col, 2.0 * xv.get(row, col) * g.data()[row]);
                }
            }
            accumulate(nodes, adj, *x, out);
        }
        Op::Square(x) => accumulate(nodes, adj, *x, g.zip_map(val(*x), |gv, xv| 2.0 * xv * gv)),
        Op::Sqrt(x) => accumulate(nodes, adj, *x, g.zip_map(y, |gv, yv| gv / (2.0 * yv))),
        Op::Exp(x) => accumulate(nodes, adj, *x, g.zip_map(y, |gv, yv| gv * yv)),
        Op::Ln(x) => accumulate(nodes, adj, *x, g.zip_map(val(*x), |gv, xv| gv / xv)),
        Op::Tanh(x) => accumulate(nodes, adj, *x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
        Op::Atanh(x) => accumulate(nodes, adj, *x, g.zip_map(val(*x), |gv, xv| gv / (1.0 - xv * xv))),
        Op::Silu { x, sig } => {
            let d = val(*x).zip_map(sig, |xv, s| s * (1.0 + xv * (1.0 - s)));
            accumulate(nodes, adj, *x, g.zip_map(&d, |gv, dv| gv * dv))
        }
        Op::Sin(x) => accumulate(nodes, adj, *x, g.zip_map(val(*x), |gv, xv| gv * xv.cos())),
        Op::Cos(x) => accumulate(nodes, adj, *x, g.zip_map(val(*x), |gv, xv| -gv * xv.sin())),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (r, c) = xhat.shape();
            let gam = val(*gamma);
            if nodes[*gamma].requires_grad {
                let mut dg = Tensor::zeros(1, c);
                for row in 0..r {
                    for col in 0..c {
                        dg.data_mut()[col] += g.get(row, col) * xhat.get(row, col);
                    }
                }
                accumulate(nodes, adj, *gamma, dg);
            }
            if nodes[*beta].requires_grad {
                let mut db = Tensor::zeros(1, c);
                for row in 0..r {
                    for col in 0..c {
                        db.data_mut()[col] += g.get(row, col);
                    }
                }
                accumulate(nodes, adj, *beta, db);
            }
            if nodes[*x].requires_grad {
                let n = c as f64;
                let mut dx = Tensor::zeros(r, c);
                for row in 0..r {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for col in 0..c {
                        let d = g.get(row, col) * gam.data()[col];
                        sum_d += d;
                        sum_dx += d * xhat.get(row, col);
                    }
                    for col in 0..c {
                        let d = g.get(row, col) * gam.data()[col];
                        let h = xhat.get(row, col);
                        dx.set(row, col, inv_std[row] / n * (n * d - sum_d - h * sum_dx));
                    }
                }
                accumulate(nodes, adj, *x, dx);
            }
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &p in ids {
                let w = val(p).cols();
                if nodes[p].requires_grad {
                    accumulate(nodes, adj, p, tensor::slice_cols(g, off, off + w));
                }
                off += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, c) = val(*x).shape();
            let w = g.cols();
            let mut out = Tensor::zeros(r, c);
            for row in 0..r {
                out.data_mut()[row * c + start..row * c + start + w].copy_from_slice(g.row_slice(row));
            }
            accumulate(nodes, adj, *x, out);
        }
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            accumulate(
                nodes,
                adj,
                *x,
                g.zip_map(val(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
            );
        }
    }
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// central finite differences with step `eps`:
/// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TapeError::BadStep(eps));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(point.clone());
        let out = f(&tape, v)?;
        let y = tape.scalar(out)?;
        if !y.is_finite() {
            return Err(TapeError::NonFinite(format!("grad_check forward value {y}")));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    let y = tape.scalar(out)?;
    if !y.is_finite() {
        return Err(TapeError::NonFinite(format!("grad_check forward value {y}")));
    }
    let analytic = tape.backward(out)?.get(v);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
