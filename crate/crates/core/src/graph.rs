//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns adjoints for all
//! nodes that require gradients. Sequence mixers are recorded as single fused
//! nodes (attention, linear-recurrence scan) with hand-written adjoints.

use crate::error::{contract, Error, Result};
use crate::kernels::attention::{self, AttnDims};
use crate::kernels::scan::{self, Rule, ScanDims, ScanInput};
use crate::kernels::{gemm, Mat};
use crate::tensor::{DType, Tensor};

pub const RMS_EPS: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-12;
pub const L2_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCols(Var, Var),
    AddCols(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm(Var, Vec<f64>),
    LayerNorm(Var, Vec<f64>),
    L2NormRows(Var, Vec<f64>),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    Scan {
        q: Var,
        k: Var,
        v: Var,
        beta: Option<Var>,
        decay: Option<Var>,
        rule: Rule,
        dims: ScanDims,
        history: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    dtype: DType,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("adjoint shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Graph {
            nodes: Vec::new(),
            dtype,
        }
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

    fn push(&mut self, mut value: Tensor, op: Op, grad: bool) -> Var {
        if self.dtype == DType::F32 {
            let d = self.dtype;
            value.data_mut().iter_mut().for_each(|x| *x = d.round(*x));
        }
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 || ta.rank() != 2 || tb.rank() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::row_major(ta.data(), k),
            Mat::row_major(tb.data(), n),
            0.0,
            &mut out,
        );
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), grad))
    }

    /// `x · wᵀ` for a weight stored as `C_out × C_in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = tx.dims2();
        let (n, k2) = tw.dims2();
        if k != k2 || tw.rank() != 2 {
            return Err(shape_err("linear", tx, tw));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::row_major(tx.data(), k),
            Mat::transposed(tw.data(), k),
            0.0,
            &mut out,
        );
        let grad = self.g(x) || self.g(w);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear(x, w), grad))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, op, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect()).unwrap();
        let grad = self.g(a);
        self.push(out, Op::Scale(a, s), grad)
    }

    /// Multiply every row of `x` element-wise by the vector `g`.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let c = tx.cols();
        if tg.len() != c {
            return Err(shape_err("mul_cols", tx, tg));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let grad = self.g(x) || self.g(g);
        Ok(self.push(out, Op::MulCols(x, g), grad))
    }

    /// Add the vector `b` to every row of `x`.
    pub fn add_cols(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape_err("add_cols", tx, tb));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let grad = self.g(x) || self.g(b);
        Ok(self.push(out, Op::AddCols(x, b), grad))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).unwrap();
        let grad = self.g(a);
        self.push(out, op, grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    fn check_rows(&self, a: Var) -> Result<(usize, usize)> {
        let (r, c) = self.value(a).dims2();
        if c == 0 {
            return Err(contract("row-wise op on zero-length rows"));
        }
        Ok((r, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rows(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let grad = self.g(a);
        Ok(self.push(out, Op::SoftmaxRows(a), grad))
    }

    /// Row-wise `x / rms(x)` with no learned gain.
    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rows(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            inv[i] = 1.0 / (ms + RMS_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] * inv[i];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let grad = self.g(a);
        Ok(self.push(out, Op::RmsNorm(a, inv), grad))
    }

    /// Row-wise standardization with no learned affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rows(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            inv[i] = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv[i];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let grad = self.g(a);
        Ok(self.push(out, Op::LayerNorm(a, inv), grad))
    }

    /// Row-wise `x / max(‖x‖₂, ε)`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rows(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            norms[i] = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = norms[i].max(L2_EPS);
            for j in 0..c {
                out[i * c + j] = row[j] / d;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let grad = self.g(a);
        Ok(self.push(out, Op::L2NormRows(a, norms), grad))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let grad = self.g(a);
        self.push(out, Op::Transpose(a), grad)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let grad = self.g(a);
        Ok(self.push(out, Op::Reshape(a), grad))
    }

    /// Row `r` of the result is row `idx[r]` of `src`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (rows, c) = t.dims2();
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("gather index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        let grad = self.g(src);
        Ok(self.push(out, Op::GatherRows(src, idx.to_vec()), grad))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::ConcatRows(a, b), grad))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Mean(a), grad)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.check_rows(logits)?;
        if targets.len() != r {
            return Err(contract(format!("{} targets for {r} logit rows", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            if targets[i] >= c {
                return Err(contract(format!("target {} outside vocabulary {c}", targets[i])));
            }
            let p = &mut probs[i * c..(i + 1) * c];
            softmax_into(&src[i * c..(i + 1) * c], p);
            loss -= p[targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / r as f64);
        let grad = self.g(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs), grad))
    }

    /// Fused causal attention over already-projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let out = attention::forward(&dims, self.value(q).data(), self.value(k).data(), self.value(v).data())?;
        let rows = dims.batch * dims.len;
        let y = Tensor::new(vec![rows, dims.heads * dims.head_dim], out.y)?;
        let grad = self.g(q) || self.g(k) || self.g(v);
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs: out.probs,
            },
            grad,
        ))
    }

    /// Fused linear-recurrence scan from a zero state.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        rule: Rule,
        dims: ScanDims,
        q: Var,
        k: Var,
        v: Var,
        beta: Option<Var>,
        decay: Option<Var>,
    ) -> Result<Var> {
        let inp = ScanInput {
            rule,
            dims,
            q: self.value(q).data(),
            k: self.value(k).data(),
            v: self.value(v).data(),
            beta: beta.map(|b| self.value(b).data()),
            decay: decay.map(|a| self.value(a).data()),
        };
        let out = scan::sequential(&inp, None, true)?;
        let y = Tensor::new(vec![dims.rows(), dims.heads * dims.dv], out.y)?;
        let grad = [Some(q), Some(k), Some(v), beta, decay]
            .into_iter()
            .flatten()
            .any(|x| self.g(x));
        Ok(self.push(
            y,
            Op::Scan {
                q,
                k,
                v,
                beta,
                decay,
                rule,
                dims,
                history: out.history.unwrap_or_default(),
            },
            grad,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Adjoints exist for every node that
    /// requires gradients and lies upstream of the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.grad {
                adj[id] = None;
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            self.propagate(node, &dy, &mut adj)?;
            adj[id] = Some(dy);
        }
        Ok(Gradients {
            grads: adj
                .into_iter()
                .zip(&self.nodes)
                .map(|(a, node)| if node.grad { a } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.g(v) {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    gemm(m, n, k, 1.0, Mat::row_major(dy, n), Mat::transposed(bd, n), 1.0, s)
                });
                acc(*b, &mut |s| {
                    gemm(k, m, n, 1.0, Mat::transposed(ad, k), Mat::row_major(dy, n), 1.0, s)
                });
            }
            Op::Linear(x, w) => {
                let (m, k) = self.value(*x).dims2();
                let n = self.value(*w).rows();
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| {
                    gemm(m, n, k, 1.0, Mat::row_major(dy, n), Mat::row_major(wd, k), 1.0, s)
                });
                acc(*w, &mut |s| {
                    gemm(n, m, k, 1.0, Mat::transposed(dy, n), Mat::row_major(xd, k), 1.0, s)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, dy));
                acc(*b, &mut |s| add_into(s, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, dy));
                acc(*b, &mut |s| s.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += dy[i] * bd[i]));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] += dy[i] * ad[i]));
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(dy).for_each(|(x, d)| *x += f * d)),
            Op::MulCols(x, g) => {
                let (xd, gd) = (self.value(*x).data(), self.value(*g).data());
                let c = gd.len();
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += dy[i] * gd[i % c]));
                acc(*g, &mut |s| (0..dy.len()).for_each(|i| s[i % c] += dy[i] * xd[i]));
            }
            Op::AddCols(x, b) => {
                let c = self.value(*b).len();
                acc(*x, &mut |s| add_into(s, dy));
                acc(*b, &mut |s| (0..dy.len()).for_each(|i| s[i % c] += dy[i]));
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                (0..s.len()).for_each(|i| s[i] += dy[i] * y[i] * (1.0 - y[i]))
            }),
            Op::Silu(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(ad[i]);
                        s[i] += dy[i] * sg * (1.0 + ad[i] * (1.0 - sg));
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for (r, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let inner: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (dr[j] - inner);
                        }
                    }
                })
            }
            Op::RmsNorm(a, inv) | Op::LayerNorm(a, inv) => {
                let c = node.value.cols();
                let centered = matches!(node.op, Op::LayerNorm(..));
                acc(*a, &mut |s| {
                    for (r, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let my: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum::<f64>() / c as f64;
                        let md: f64 = if centered {
                            dr.iter().sum::<f64>() / c as f64
                        } else {
                            0.0
                        };
                        for j in 0..c {
                            s[r * c + j] += inv[r] * (dr[j] - md - yr[j] * my);
                        }
                    }
                })
            }
            Op::L2NormRows(a, norms) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for (r, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                        if norms[r] > L2_EPS {
                            let inner: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                            for j in 0..c {
                                s[r * c + j] += (dr[j] - yr[j] * inner) / norms[r];
                            }
                        } else {
                            for j in 0..c {
                                s[r * c + j] += dr[j] / L2_EPS;
                            }
                        }
                    }
                })
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += dy[i * c + j];
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, dy)),
            Op::GatherRows(src, idx) => {
                let c = node.value.cols();
                acc(*src, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[i * c + j] += dy[r * c + j];
                        }
                    }
                })
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                acc(*a, &mut |s| add_into(s, &dy[..na]));
                acc(*b, &mut |s| add_into(s, &dy[na..]));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += dy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += dy[0] / n))
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let c = self.value(*logits).cols();
                let scale = dy[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                })
            }
            Op::Attention { q, k, v, dims, probs } => {
                let g = attention::backward(
                    dims,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    dy,
                );
                acc(*q, &mut |s| add_into(s, &g.q));
                acc(*k, &mut |s| add_into(s, &g.k));
                acc(*v, &mut |s| add_into(s, &g.v));
            }
            Op::Scan {
                q,
                k,
                v,
                beta,
                decay,
                rule,
                dims,
                history,
            } => {
                let inp = ScanInput {
                    rule: *rule,
                    dims: *dims,
                    q: self.value(*q).data(),
                    k: self.value(*k).data(),
                    v: self.value(*v).data(),
                    beta: beta.map(|b| self.value(b).data()),
                    decay: decay.map(|a| self.value(a).data()),
                };
                let g = scan::backward(&inp, history, dy)?;
                acc(*q, &mut |s| add_into(s, &g.q));
                acc(*k, &mut |s| add_into(s, &g.k));
                acc(*v, &mut |s| add_into(s, &g.v));
                if let (Some(b), Some(gb)) = (beta, &g.beta) {
                    acc(*b, &mut |s| add_into(s, gb));
                }
                if let (Some(a), Some(ga)) = (decay, &g.decay) {
                    acc(*a, &mut |s| add_into(s, ga));
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - m).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
