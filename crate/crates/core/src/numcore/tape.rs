//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! Values are recorded in a flat arena as operations are applied; [`GradTape::grad`]
//! replays the arena backward and accumulates adjoints. Only tracked leaves and the
//! nodes that depend on them participate in the backward pass, so frozen parameters
//! registered with [`GradTape::constant`] cost nothing there.
//!
//! Shape mismatches while recording are programmer errors and panic.

use super::special::{digamma_raw, lse, sigmoid, softplus_raw};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    LnGamma(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    RowSum(Var),
    RowLogSumExp(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.rows(), a.cols(), data)
}

/// Applies `f(a_ij, c_i)` where `c` is a column vector with one entry per row of `a`.
fn col_map(a: &Tensor, c: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(c.cols(), 1, "column operand must have one column");
    assert_eq!(a.rows(), c.rows(), "column operand row mismatch");
    let k = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| f(x, c.data()[idx / k]))
        .collect();
    Tensor::from_parts(a.rows(), k, data)
}

fn row_reduce(a: &Tensor, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let data = a.row_iter().map(f).collect();
    Tensor::from_parts(a.rows(), 1, data)
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    /// Drops every recorded value. Called between optimization steps.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input: gradients can be requested for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.cols(), wv.cols(), "bias width mismatch");
        assert_eq!(xv.cols(), wv.rows(), "affine input width mismatch");
        let n = xv.rows();
        let mut out = Tensor::from_parts(n, bv.cols(), bv.data().repeat(n));
        gemm(xv, false, wv, false, &mut out, 1.0);
        self.push(out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul shape mismatch");
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Row-broadcast product: `a: [n, k]` times column `c: [n, 1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let out = col_map(self.value(a), self.value(c), |x, s| x * s);
        self.push(out, Op::MulCol(a, c), &[a, c])
    }

    /// Row-broadcast quotient: `a: [n, k]` divided by column `c: [n, 1]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Var {
        let out = col_map(self.value(a), self.value(c), |x, s| x / s);
        self.push(out, Op::DivCol(a, c), &[a, c])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_raw);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    /// Elementwise `ln Γ`; inputs must be positive.
    pub fn ln_gamma(&mut self, a: Var) -> Var {
        let out = self.value(a).map(super::special::ln_gamma_raw);
        self.push(out, Op::LnGamma(a), &[a])
    }

    /// `max(a, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x.max(c));
        self.push(out, Op::ClampMin(a, c), &[a])
    }

    /// `min(a, c)`; the gradient is zero where the ceiling is active.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x.min(c));
        self.push(out, Op::ClampMax(a, c), &[a])
    }

    /// `[n, k] -> [n, 1]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = row_reduce(self.value(a), |r| r.iter().sum());
        self.push(out, Op::RowSum(a), &[a])
    }

    /// `[n, k] -> [n, 1]`, max-shifted per row.
    pub fn row_log_sum_exp(&mut self, a: Var) -> Var {
        let out = row_reduce(self.value(a), lse);
        self.push(out, Op::RowLogSumExp(a), &[a])
    }

    /// Mean of all entries, as a `[1, 1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Adjoints of a scalar `output` with respect to each tracked leaf in `inputs`.
    pub fn grad(&self, output: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(output).len() != 1 {
            return Err(Error::arg("gradient output must be a scalar"));
        }
        for v in inputs {
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(Error::arg(format!("{v:?} is not a tracked leaf")));
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop(node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        Ok(inputs
            .iter()
            .map(|v| {
                adj.get(v.0).cloned().flatten().unwrap_or_else(|| {
                    let t = self.value(*v);
                    Tensor::zeros(t.rows(), t.cols())
                })
            })
            .collect())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let y = &node.value;
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(g, false, wv, true, &mut dx, 0.0);
                    self.accumulate(adj, x, dx);
                }
                if self.needs(w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(xv, true, g, false, &mut dw, 0.0);
                    self.accumulate(adj, w, dw);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; g.cols()];
                    for row in g.row_iter() {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(adj, b, Tensor::from_parts(1, g.cols(), db));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    self.accumulate(adj, a, da);
                }
                if self.needs(b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    self.accumulate(adj, b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                if self.needs(b) {
                    self.accumulate(adj, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(adj, a, zip_map(g, self.value(b), |gv, bv| gv * bv));
                }
                if self.needs(b) {
                    self.accumulate(adj, b, zip_map(g, self.value(a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                if self.needs(a) {
                    self.accumulate(adj, a, zip_map(g, bv, |gv, d| gv / d));
                }
                if self.needs(b) {
                    // d(a/b)/db = −y/b
                    let t = zip_map(g, y, |gv, yv| gv * yv);
                    self.accumulate(adj, b, zip_map(&t, bv, |tv, d| -tv / d));
                }
            }
            Op::AddScalar(a) => self.accumulate(adj, a, g.clone()),
            Op::Scale(a, c) => self.accumulate(adj, a, g.map(|v| v * c)),
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(a), self.value(c));
                if self.needs(a) {
                    self.accumulate(adj, a, col_map(g, cv, |gv, s| gv * s));
                }
                if self.needs(c) {
                    let prod = zip_map(g, av, |gv, x| gv * x);
                    self.accumulate(adj, c, row_reduce(&prod, |r| r.iter().sum()));
                }
            }
            Op::DivCol(a, c) => {
                let cv = self.value(c);
                if self.needs(a) {
                    self.accumulate(adj, a, col_map(g, cv, |gv, s| gv / s));
                }
                if self.needs(c) {
                    // d(a_ij / c_i)/dc_i = −y_ij / c_i
                    let prod = zip_map(g, y, |gv, yv| gv * yv);
                    let s = row_reduce(&prod, |r| r.iter().sum());
                    self.accumulate(adj, c, zip_map(&s, cv, |sv, ci| -sv / ci));
                }
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(adj, a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(a), |gv, x| gv * sigmoid(x));
                self.accumulate(adj, a, d);
            }
            Op::Exp(a) => self.accumulate(adj, a, zip_map(g, y, |gv, yv| gv * yv)),
            Op::Ln(a) => {
                let d = zip_map(g, self.value(a), |gv, x| gv / x);
                self.accumulate(adj, a, d);
            }
            Op::LnGamma(a) => {
                let d = zip_map(g, self.value(a), |gv, x| gv * digamma_raw(x));
                self.accumulate(adj, a, d);
            }
            Op::ClampMin(a, c) => {
                let d = zip_map(g, self.value(a), |gv, x| if x >= c { gv } else { 0.0 });
                self.accumulate(adj, a, d);
            }
            Op::ClampMax(a, c) => {
                let d = zip_map(g, self.value(a), |gv, x| if x <= c { gv } else { 0.0 });
                self.accumulate(adj, a, d);
            }
            Op::RowSum(a) => {
                let av = self.value(a);
                self.accumulate(adj, a, col_map(&Tensor::zeros(av.rows(), av.cols()), g, |_, gi| gi));
            }
            Op::RowLogSumExp(a) => {
                // d lse_i / d a_ij = softmax_ij = exp(a_ij − lse_i)
                let soft = col_map(self.value(a), y, |x, l| (x - l).exp());
                self.accumulate(adj, a, col_map(&soft, g, |s, gi| s * gi));
            }
            Op::Mean(a) => {
                let av = self.value(a);
                let scale = g.item() / av.len() as f64;
                self.accumulate(adj, a, Tensor::full(av.rows(), av.cols(), scale));
            }
            Op::Sum(a) => {
                let av = self.value(a);
                self.accumulate(adj, a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
        }
    }
}
