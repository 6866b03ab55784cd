//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] is built eagerly during one forward pass and discarded after
//! [`Tape::backward`]. Nodes live in an arena indexed by [`Var`]; recording
//! order is topological, so the backward pass is a single reverse sweep that
//! visits every node exactly once. A tape is confined to one logical thread;
//! batch parallelism uses one private tape per sample.

use num_traits::Float;

use crate::error::{LionError, Result};
use crate::tensor::{matmul_into, softmax_row, transpose_into, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// out = a @ b, a: m x p, b: p x q
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { a: Var, c: T },
    /// out[i, :] = a[i, :] + bias
    AddRowBroadcast { a: Var, bias: Var },
    Gelu { a: Var },
    Sqrt { a: Var },
    /// Per-row normalization over the last axis with learnable gain and shift.
    LayerNormRows { a: Var, gamma: Var, beta: Var, eps: T },
    SoftmaxRows { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Transpose { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
pub struct GradMap<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0].clone(), g.clone()).expect("shape tracked"))
    }
}

/// Record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, op, requires_grad: false });
        Var(id)
    }

    /// Register a tensor as a leaf. Copies the data; gradient flows to it
    /// iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let id = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf);
        self.nodes[id.0].requires_grad = t.requires_grad();
        id
    }

    /// Leaf that always receives gradient, regardless of the tensor flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let id = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec()).expect("shape tracked")
    }

    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].shape[1]
    }

    fn require_matrix(&self, v: Var, ctx: &'static str) -> Result<()> {
        if self.nodes[v.0].shape.len() != 2 {
            return Err(LionError::DimensionMismatch {
                ctx,
                lhs: self.nodes[v.0].shape.clone(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    // ── Recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_matrix(a, "matmul")?;
        self.require_matrix(b, "matmul")?;
        let (m, p) = (self.rows(a), self.cols(a));
        let (p2, q) = (self.rows(b), self.cols(b));
        if p != p2 {
            return Err(LionError::DimensionMismatch {
                ctx: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * q];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, p, q);
        Ok(self.push(out, vec![m, q], Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul_elem", |x, y| x * y, Op::MulElem { a, b })
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        ctx: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(LionError::DimensionMismatch {
                ctx,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, op))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Scale { a, c })
    }

    /// Add a length-`d` bias vector to every row of an `n x d` matrix.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.require_matrix(a, "add_row_broadcast")?;
        let d = self.cols(a);
        if self.nodes[bias.0].data.len() != d {
            return Err(LionError::DimensionMismatch {
                ctx: "add_row_broadcast",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let n = self.rows(a);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] + self.nodes[bias.0].data[j];
            }
        }
        Ok(self.push(data, vec![n, d], Op::AddRowBroadcast { a, bias }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Gelu { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Sqrt { a })
    }

    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.require_matrix(a, "layer_norm_rows")?;
        let (n, d) = (self.rows(a), self.cols(a));
        if self.nodes[gamma.0].data.len() != d || self.nodes[beta.0].data.len() != d {
            return Err(LionError::DimensionMismatch {
                ctx: "layer_norm_rows",
                lhs: vec![n, d],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut data = vec![T::zero(); n * d];
        let dd = T::from_f64(d as f64);
        for i in 0..n {
            let row = &self.nodes[a.0].data[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dd;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / dd;
            let inv_sigma = T::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_sigma;
                data[i * d + j] = xhat * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        Ok(self.push(data, vec![n, d], Op::LayerNormRows { a, gamma, beta, eps }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "softmax_rows")?;
        if self.nodes[a.0].data.iter().any(|v| v.is_nan()) {
            return Err(LionError::NanInput("softmax_rows"));
        }
        let (n, d) = (self.rows(a), self.cols(a));
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            softmax_row(&self.nodes[a.0].data[i * d..(i + 1) * d], &mut data[i * d..(i + 1) * d]);
        }
        Ok(self.push(data, vec![n, d], Op::SoftmaxRows { a }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.require_matrix(a, "slice_rows")?;
        let (n, d) = (self.rows(a), self.cols(a));
        if start + len > n {
            return Err(LionError::DimensionMismatch {
                ctx: "slice_rows",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        Ok(self.push(data, vec![len, d], Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.require_matrix(a, "slice_cols")?;
        let (n, d) = (self.rows(a), self.cols(a));
        if start + len > d {
            return Err(LionError::DimensionMismatch {
                ctx: "slice_cols",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let mut data = vec![T::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[i * d + start..i * d + start + len]);
        }
        Ok(self.push(data, vec![n, len], Op::SliceCols { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.cols(parts[0]);
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            self.require_matrix(p, "concat_rows")?;
            if self.cols(p) != d {
                return Err(LionError::DimensionMismatch {
                    ctx: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            n += self.rows(p);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(data, vec![n, d], Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rows(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            self.require_matrix(p, "concat_cols")?;
            if self.rows(p) != n {
                return Err(LionError::DimensionMismatch {
                    ctx: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(self.cols(p));
            total += self.cols(p);
        }
        let mut data = vec![T::zero(); n * total];
        for i in 0..n {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
                off += w;
            }
        }
        Ok(self.push(data, vec![n, total], Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "transpose")?;
        let (n, d) = (self.rows(a), self.cols(a));
        let mut data = vec![T::zero(); n * d];
        transpose_into(&self.nodes[a.0].data, &mut data, n, d);
        Ok(self.push(data, vec![d, n], Op::Transpose { a }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in &self.nodes[a.0].data {
            s = s + v;
        }
        self.push(vec![s], vec![1], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.nodes[a.0].data.len() as f64);
        let mut s = T::zero();
        for &v in &self.nodes[a.0].data {
            s = s + v;
        }
        self.push(vec![s / n], vec![1], Op::MeanAll { a })
    }

    /// Mean squared difference of two same-shape values, as a recorded scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.mul_elem(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node;
    /// leaves registered via [`Tape::constant`] still accumulate internally
    /// but their gradients are simply unused by callers.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(LionError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let Some(d_out) = grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &d_out, &mut grads);
            grads[idx] = Some(d_out);
        }

        Ok(GradMap {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.shape.clone()).collect(),
        })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(delta.iter()) {
                    *gi = *gi + di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, op: &Op<T>, d_out: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, p) = (self.rows(*a), self.cols(*a));
                let q = self.cols(*b);
                // dA = dC @ B^T
                let mut bt = vec![T::zero(); p * q];
                transpose_into(&self.nodes[b.0].data, &mut bt, p, q);
                let mut da = vec![T::zero(); m * p];
                matmul_into(d_out, &bt, &mut da, m, q, p);
                Self::accumulate(grads, *a, &da);
                // dB = A^T @ dC
                let mut at = vec![T::zero(); p * m];
                transpose_into(&self.nodes[a.0].data, &mut at, m, p);
                let mut db = vec![T::zero(); p * q];
                matmul_into(&at, d_out, &mut db, p, m, q);
                Self::accumulate(grads, *b, &db);
            }

            Op::Add { a, b } => {
                Self::accumulate(grads, *a, d_out);
                Self::accumulate(grads, *b, d_out);
            }

            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, d_out);
                let neg: Vec<T> = d_out.iter().map(|&g| -g).collect();
                Self::accumulate(grads, *b, &neg);
            }

            Op::MulElem { a, b } => {
                let da: Vec<T> = d_out
                    .iter()
                    .zip(self.nodes[b.0].data.iter())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<T> = d_out
                    .iter()
                    .zip(self.nodes[a.0].data.iter())
                    .map(|(&g, &x)| g * x)
                    .collect();
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }

            Op::Scale { a, c } => {
                let da: Vec<T> = d_out.iter().map(|&g| g * *c).collect();
                Self::accumulate(grads, *a, &da);
            }

            Op::AddRowBroadcast { a, bias } => {
                Self::accumulate(grads, *a, d_out);
                let d = self.nodes[bias.0].data.len();
                let n = self.rows(*a);
                let mut db = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] = db[j] + d_out[i * d + j];
                    }
                }
                Self::accumulate(grads, *bias, &db);
            }

            Op::Gelu { a } => {
                let da: Vec<T> = d_out
                    .iter()
                    .zip(self.nodes[a.0].data.iter())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                Self::accumulate(grads, *a, &da);
            }

            Op::Sqrt { a } => {
                let two = T::from_f64(2.0);
                let da: Vec<T> = d_out
                    .iter()
                    .zip(self.nodes[idx].data.iter())
                    .map(|(&g, &y)| g / (two * y))
                    .collect();
                Self::accumulate(grads, *a, &da);
            }

            Op::LayerNormRows { a, gamma, beta, eps } => {
                let (n, d) = (self.rows(*a), self.cols(*a));
                let dd = T::from_f64(d as f64);
                let mut da = vec![T::zero(); n * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..n {
                    let row = &self.nodes[a.0].data[i * d..(i + 1) * d];
                    let dy = &d_out[i * d..(i + 1) * d];
                    let mut mean = T::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / dd;
                    let mut var = T::zero();
                    for &v in row {
                        var = var + (v - mean) * (v - mean);
                    }
                    var = var / dd;
                    let inv_sigma = T::one() / (var + *eps).sqrt();

                    // xhat_j = (x_j - mean) * inv_sigma
                    // dx = inv_sigma * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_sigma;
                        let dxhat = dy[j] * self.nodes[gamma.0].data[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + dy[j] * xhat;
                        dbeta[j] = dbeta[j] + dy[j];
                    }
                    let mean_dxhat = sum_dxhat / dd;
                    let mean_dxhat_xhat = sum_dxhat_xhat / dd;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_sigma;
                        let dxhat = dy[j] * self.nodes[gamma.0].data[j];
                        da[i * d + j] = inv_sigma * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *gamma, &dgamma);
                Self::accumulate(grads, *beta, &dbeta);
            }

            Op::SoftmaxRows { a } => {
                let (n, d) = (self.rows(*a), self.cols(*a));
                let mut da = vec![T::zero(); n * d];
                for i in 0..n {
                    let y = &self.nodes[idx].data[i * d..(i + 1) * d];
                    let dy = &d_out[i * d..(i + 1) * d];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + dy[j] * y[j];
                    }
                    for j in 0..d {
                        da[i * d + j] = y[j] * (dy[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, &da);
            }

            Op::SliceRows { a, start } => {
                let d = self.cols(*a);
                let n = self.rows(*a);
                let len = self.nodes[idx].shape[0];
                let mut da = vec![T::zero(); n * d];
                da[start * d..(start + len) * d].copy_from_slice(d_out);
                Self::accumulate(grads, *a, &da);
            }

            Op::SliceCols { a, start } => {
                let d = self.cols(*a);
                let n = self.rows(*a);
                let len = self.nodes[idx].shape[1];
                let mut da = vec![T::zero(); n * d];
                for i in 0..n {
                    da[i * d + start..i * d + start + len]
                        .copy_from_slice(&d_out[i * len..(i + 1) * len]);
                }
                Self::accumulate(grads, *a, &da);
            }

            Op::ConcatRows { parts } => {
                let d = self.nodes[idx].shape[1];
                let mut off = 0;
                for &p in parts {
                    let r = self.rows(p);
                    Self::accumulate(grads, p, &d_out[off * d..(off + r) * d]);
                    off += r;
                }
            }

            Op::ConcatCols { parts } => {
                let n = self.nodes[idx].shape[0];
                let total = self.nodes[idx].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.cols(p);
                    let mut dp = vec![T::zero(); n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&d_out[i * total + off..i * total + off + w]);
                    }
                    Self::accumulate(grads, p, &dp);
                    off += w;
                }
            }

            Op::Transpose { a } => {
                let (n, d) = (self.rows(*a), self.cols(*a));
                let mut da = vec![T::zero(); n * d];
                transpose_into(d_out, &mut da, d, n);
                Self::accumulate(grads, *a, &da);
            }

            Op::SumAll { a } => {
                let g = d_out[0];
                let da = vec![g; self.nodes[a.0].data.len()];
                Self::accumulate(grads, *a, &da);
            }

            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let g = d_out[0] / T::from_f64(n as f64);
                let da = vec![g; n];
                Self::accumulate(grads, *a, &da);
            }
        }
    }
}

fn gelu<T: Float>(x: T) -> T {
    // tanh approximation; smooth everywhere so finite-difference checks stay tight
    let half = T::from(0.5).unwrap();
    let c = T::from(0.7978845608028654).unwrap(); // sqrt(2/pi)
    let k = T::from(0.044715).unwrap();
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::from(0.5).unwrap();
    let c = T::from(0.7978845608028654).unwrap();
    let k = T::from(0.044715).unwrap();
    let three = T::from(3.0).unwrap();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// Max relative error between tape gradients of `f` at `x` and central
/// finite differences with step `eps`.
///
/// `f` rebuilds the computation from an input [`Var`] to a scalar loss
/// [`Var`] on the tape it is given; the finite-difference side re-evaluates
/// it on fresh tapes, so the two routes stay independent.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut x = x.clone();
    x.set_requires_grad(true);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.grad(xv).expect("input gradient").to_vec();

    let eval = |data: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(data);
        let l = f(&mut t, v)?;
        Ok(t.scalar(l))
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = eval(&x)?;
        x.data_mut()[i] = orig - eps;
        let down = eval(&x)?;
        x.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(1.0);
        let err = (analytic[i] - fd).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
