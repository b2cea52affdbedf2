//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass that
//! visits every node at most once.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Log(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    /// Forward value is supplied by the caller; the gradient goes to the soft input unchanged.
    StraightThrough(Var),
    Cosine { a: Var, b: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Inserts a tensor; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let g = tensor.requires_grad();
        self.push(tensor, Op::Leaf, g)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    /// Adds a bias vector to every row. The only broadcast the graph supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(bias))?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(v, Op::AddRow(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Scale(x, k), g)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::Transpose(x), g))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::SoftmaxRows(x), g))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = tensor::log_softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::LogSoftmaxRows(x), g))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let stats = tensor::layernorm_stats(self.value(x))?;
        let v = tensor::apply_affine(&stats.normalized, self.value(gain), self.value(bias))?;
        let g = self.any_grad(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: stats.normalized,
            inv_std: stats.inv_std,
        };
        Ok(self.push(v, op, g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Log(x), g)
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&values)?;
        let g = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&values)?;
        let g = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, end)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, end)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?.with_grad(false);
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    /// Uses `forward` as the value while routing gradients straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, forward: Tensor) -> Result<Var> {
        if forward.shape() != self.value(soft).shape() {
            return Err(Error::dim(
                "straight_through",
                format!("{:?} vs {:?}", forward.shape(), self.value(soft).shape()),
            ));
        }
        let g = self.any_grad(&[soft]);
        Ok(self.push(forward, Op::StraightThrough(soft), g))
    }

    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let v = tensor::cosine_matrix(self.value(a), self.value(b), eps)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Cosine { a, b, eps }, g))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v`, followed by the output mix `concat(heads) · wo`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, wo: Var, heads: usize) -> Result<Var> {
        let (_, d) = self.value(q).expect_matrix("attention")?;
        let (nk, dk) = self.value(k).expect_matrix("attention")?;
        let (nv, dv) = self.value(v).expect_matrix("attention")?;
        if dk != d || dv != d || nk != nv {
            return Err(Error::dim(
                "attention",
                format!("q width {d}, k {nk}x{dk}, v {nv}x{dv}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = if heads == 1 { q } else { self.slice_cols(q, lo, hi)? };
            let kh = if heads == 1 { k } else { self.slice_cols(k, lo, hi)? };
            let vh = if heads == 1 { v } else { self.slice_cols(v, lo, hi)? };
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale);
            let probs = self.softmax_rows(scores)?;
            outs.push(self.matmul(probs, vh)?);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            self.concat_cols(&outs)?
        };
        self.matmul(joined, wo)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be a scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    let bt = self.value(*b).transpose()?;
                    self.accumulate(grads, *a, dy.matmul(&bt)?);
                }
                if self.needs_grad(*b) {
                    let at = self.value(*a).transpose()?;
                    self.accumulate(grads, *b, at.matmul(dy)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, dy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.needs_grad(*bias) {
                    let n = dy.cols();
                    let mut col = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (c, g) in col.iter_mut().zip(row) {
                            *c += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, col)?);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, dy.scale(*k)),
            Op::Transpose(x) => self.accumulate(grads, *x, dy.transpose()?),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = dy.data().to_vec();
                for (drow, yrow) in dx.chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for (g, p) in drow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = dy.data().to_vec();
                for (drow, yrow) in dx.chunks_mut(n).zip(y.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for (g, ly) in drow.iter_mut().zip(yrow) {
                        *g -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let gv = self.value(*gain).data();
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, s) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dyr = &dy.data()[span.clone()];
                        let xr = &xhat.data()[span.clone()];
                        let dxhat: Vec<f64> = dyr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dh), xh) in dx[span].iter_mut().zip(&dxhat).zip(xr) {
                            *o = s * (dh - mean_d - xh * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                }
                if self.needs_grad(*gain) || self.needs_grad(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (dyr, xr) in dy.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            dg[j] += dyr[j] * xr[j];
                            db[j] += dyr[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, dg)?);
                    self.accumulate(grads, *bias, Tensor::new(bs, db)?);
                }
            }
            Op::Gelu(x) => {
                let g = dy.zip_map(self.value(*x), |g, v| g * tensor::gelu_grad(v))?;
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = dy.zip_map(self.value(*x), |g, v| g / v)?;
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, dy.item()));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let m = self.value(*p).rows();
                    if self.needs_grad(*p) {
                        self.accumulate(grads, *p, dy.slice_rows(start, start + m)?);
                    }
                    start += m;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    if self.needs_grad(*p) {
                        self.accumulate(grads, *p, dy.slice_cols(start, start + n)?);
                    }
                    start += n;
                }
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let n = src.cols();
                let mut g = Tensor::zeros(src.shape());
                g.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, g);
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let n = src.cols();
                let w = dy.cols();
                let mut g = Tensor::zeros(src.shape());
                for (r, drow) in dy.data().chunks(w).enumerate() {
                    g.data_mut()[r * n + start..r * n + start + w].copy_from_slice(drow);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, dy.reshape(&shape)?.with_grad(false));
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, dy.clone()),
            Op::Cosine { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = &node.value;
                let na = tensor::row_norms(av, *eps);
                let nb = tensor::row_norms(bv, *eps);
                // the eps floor is constant, so a clamped norm contributes no gradient
                let a_live: Vec<bool> = na.iter().map(|&n| n > *eps).collect();
                let b_live: Vec<bool> = nb.iter().map(|&n| n > *eps).collect();
                let (p, q, d) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; p * d];
                let mut db = vec![0.0; q * d];
                for i in 0..p {
                    for j in 0..q {
                        let g = dy.get(i, j);
                        if g == 0.0 {
                            continue;
                        }
                        let cij = c.get(i, j);
                        let inv = 1.0 / (na[i] * nb[j]);
                        for t in 0..d {
                            let (x, y) = (av.get(i, t), bv.get(j, t));
                            let mut ga = y * inv;
                            if a_live[i] {
                                ga -= cij * x / (na[i] * na[i]);
                            }
                            let mut gb = x * inv;
                            if b_live[j] {
                                gb -= cij * y / (nb[j] * nb[j]);
                            }
                            da[i * d + t] += g * ga;
                            db[j * d + t] += g * gb;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Ok(())
    }
}
