//! Define-by-run tape. Every forward pass builds a fresh [`Graph`]; calling
//! [`Graph::backward`] walks the tape in reverse and returns per-node
//! gradients, which can then be accumulated into a [`ParamSet`].

use crate::error::{GradError, Result};
use crate::linalg;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{broadcast_shape, Broadcast, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumLast(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter leaf on `graph` into its tensor in `params`.
    pub fn accumulate_into(&self, graph: &Graph, params: &mut ParamSet) -> Result<()> {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads[i].as_ref()) {
                params.get_mut(pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a copy of `t`; tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a parameter; its gradient is routed back by [`Gradients::accumulate_into`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        let v = self.push(t.detached(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GradError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = linalg::matmul(self.data(a), self.data(b), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let pa = Broadcast::plan(self.shape(a), &out_shape);
        let pb = Broadcast::plan(self.shape(b), &out_shape);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..n).map(|i| f(da[pa.index(i)], db[pb.index(i)])).collect();
        Ok((Tensor::new(&out_shape, out)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data: Vec<f64> = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape(), data).expect("unary preserves shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), linalg::sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), linalg::softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last axis; `[rows, cols]` becomes `[rows]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let out: Vec<f64> = t.data().chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let t = Tensor::new(&shape, out).expect("sum_last shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::SumLast(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = linalg::softmax_rows(t.data(), t.cols());
        let t = Tensor::new(t.shape(), out).expect("softmax shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = linalg::log_softmax_rows(t.data(), t.cols());
        let t = Tensor::new(t.shape(), out).expect("log_softmax shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(GradError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut total_cols = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(GradError::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total_cols += self.value(v).cols();
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total_cols);
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if t.shape().is_empty() || start >= end || end > cols {
            return Err(GradError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} outside last axis of {:?}", t.shape()),
            });
        }
        let out: Vec<f64> = t
            .data()
            .chunks(cols)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, start }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(GradError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass followed by accumulation into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, params)?;
        Ok(grads)
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, delta: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match grads[to.0].as_mut() {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            None => grads[to.0] = Some(delta),
        }
    }

    /// Gradient of a broadcast binary op with respect to one operand, reduced to its shape.
    fn reduce_broadcast(
        &self,
        out: &Tensor,
        operand: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) -> Vec<f64> {
        let target = self.value(operand);
        let plan = Broadcast::plan(target.shape(), out.shape());
        let mut acc = vec![0.0; target.numel()];
        for (i, gi) in g.iter().enumerate() {
            acc[plan.index(i)] += gi * local(i);
        }
        acc
    }

    /// `g ⊙ f'(x)` where `f` returns the local derivative at each input.
    fn elementwise(&self, x: Var, g: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let xin = self.data(x);
        g.iter().zip(xin).map(|(gi, &xi)| gi * f(xi)).collect()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = linalg::matmul_bt(g, self.data(*b), n, m, k);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = linalg::matmul_at(self.data(*a), g, k, n, m);
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let ga = self.reduce_broadcast(out, *a, g, |_| 1.0);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_broadcast(out, *b, g, |_| sign);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let shape = out.shape();
                let pa = Broadcast::plan(self.shape(*a), shape);
                let pb = Broadcast::plan(self.shape(*b), shape);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let ga = self.reduce_broadcast(out, *a, g, |i| {
                        let y = db[pb.index(i)];
                        if is_div {
                            1.0 / y
                        } else {
                            y
                        }
                    });
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_broadcast(out, *b, g, |i| {
                        let x = da[pa.index(i)];
                        if is_div {
                            let y = db[pb.index(i)];
                            -x / (y * y)
                        } else {
                            x
                        }
                    });
                    self.send(grads, *b, gb);
                }
            }
            Op::Neg(x) => self.send(grads, *x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => self.send(grads, *x, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(x) => self.send(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let cols = self.value(*x).cols();
                let gx: Vec<f64> = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, cols)).collect();
                self.send(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = self.elementwise(*x, g, |v| 2.0 * v);
                self.send(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = self.elementwise(*x, g, |v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.send(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                self.send(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = self.elementwise(*x, g, |v| 1.0 / v);
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = self.elementwise(*x, g, |v| if v > 0.0 { 1.0 } else { 0.0 });
                self.send(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.elementwise(*x, g, |v| linalg::sigmoid(v));
                self.send(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = self.elementwise(*x, g, |v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                self.send(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let cols = out.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * total;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.send(grads, v, gv);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let src_cols = self.value(*x).cols();
                let c = out.cols();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, gr) in g.chunks(c).enumerate() {
                    gx[r * src_cols + start..r * src_cols + start + c].copy_from_slice(gr);
                }
                self.send(grads, *x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.input(&Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.input(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(w), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_t = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = g.constant(a_t.clone());
        let p = g.matmul(eye, a).unwrap();
        assert_eq!(g.data(p), a_t.data());
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[4]));
        let msg = g.add(a, c).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn untracked_graph_has_no_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
