//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends one node holding its forward value and enough saved
//! state to replay its adjoint. [`Tape::backward`] walks the nodes in reverse
//! creation order, so gradients are bitwise reproducible for a fixed program.
//!
//! Gradient accumulation: each call to `backward` adds into the leaf gradient
//! buffers kept by the tape; [`Tape::zero_grad`] clears them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttentionDims, AttentionGrads, KeySets};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Ln,
    Abs,
    SmoothL1,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Abs => "abs",
            Unary::SmoothL1 => "smooth_l1",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::SmoothL1 => smooth_l1(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    x
                } else if x > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `0.5 x^2` for `|x| < 1`, otherwise `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Arc<Vec<f64>>),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        group_len: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CausalConv {
        x: Var,
        kernel: Var,
        group_len: usize,
        lookahead: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Arc<KeySets>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm, for the caller to
/// fold into running statistics.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    train: bool,
    rng: ChaCha8Rng,
    norm_stats: Vec<NormStats>,
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity and batch norm uses
    /// running statistics.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    /// Tape in training mode with a seeded dropout stream.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    pub fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm_stats
    }

    pub(crate) fn record_norm_stats(&mut self, stats: NormStats) {
        self.norm_stats.push(stats);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ----- leaves -------------------------------------------------------

    /// Input that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Input whose gradient is tracked and readable through [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), p.trainable(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    // ----- linear algebra -----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `x [m, k] . w [k, n] + b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.mat(x);
        let (k2, n) = self.mat(w);
        if k != k2 || self.shape(w).len() != 2 {
            return Err(self.shape_err("linear", x, w));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(self.shape_err("linear(bias)", w, b));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        matmul_into(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Linear { x, w, b }))
    }

    // ----- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, rg, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a length-`n` row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(self.shape_err("mul_row", x, row));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (v, g) in chunk.iter_mut().zip(&r) {
                *v *= g;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, rg, Op::MulRow(x, row)))
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.mat(x);
        if factors.len() != m {
            return Err(NumericsError::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let mut t = self.value(x).clone();
        for (chunk, f) in t.data_mut().chunks_mut(n.max(1)).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::ScaleRows(x, Arc::new(factors))))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v += c);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::AddScalar(x))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f.apply(*v));
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Unary(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    // ----- structural ---------------------------------------------------

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(self.value(p).cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * n + col..r * n + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_rows"))?;
        let n = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x);
        if start + len > n {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, start + len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            rg,
            Op::SliceCols { x, start },
        ))
    }

    /// Row `index[r]` of `x` becomes row `r` of the output; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = self.mat(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(NumericsError::Shape {
                op: "gather_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![bad],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in &index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), n], out)?,
            rg,
            Op::GatherRows {
                x,
                index: Arc::new(index),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    // ----- reductions and normalizations -------------------------------

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.cols();
        for row in t.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Softmax(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.cols();
        for row in t.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Layer normalization over the last axis with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.mat(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..n {
                let h = (row[c] - mu) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization using statistics of each consecutive block of
    /// `group_len` rows, per channel. Returns the output and the per-channel
    /// statistics averaged over groups (biased variance per group).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group_len: usize,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (m, n) = self.mat(x);
        if group_len == 0 || m % group_len != 0 {
            return Err(NumericsError::Invalid(format!(
                "batch_norm: {m} rows are not a multiple of group length {group_len}"
            )));
        }
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(self.shape_err("batch_norm", x, gamma));
        }
        let groups = m / group_len;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; groups * n];
        let mut out = vec![0.0; m * n];
        let mut mean_acc = vec![0.0; n];
        let mut var_acc = vec![0.0; n];
        let l = group_len as f64;
        for grp in 0..groups {
            for c in 0..n {
                let mut mu = 0.0;
                for t in 0..group_len {
                    mu += src[(grp * group_len + t) * n + c];
                }
                mu /= l;
                let mut var = 0.0;
                for t in 0..group_len {
                    let d = src[(grp * group_len + t) * n + c] - mu;
                    var += d * d;
                }
                var /= l;
                mean_acc[c] += mu;
                var_acc[c] += var;
                let s = 1.0 / (var + NORM_EPS).sqrt();
                rstd[grp * n + c] = s;
                for t in 0..group_len {
                    let i = (grp * group_len + t) * n + c;
                    let h = (src[i] - mu) * s;
                    xhat[i] = h;
                    out[i] = h * g[c] + b[c];
                }
            }
        }
        mean_acc.iter_mut().for_each(|v| *v /= groups as f64);
        var_acc.iter_mut().for_each(|v| *v /= groups as f64);
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            t,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                group_len,
                xhat,
                rstd,
            },
        );
        Ok((v, mean_acc, var_acc))
    }

    /// Batch normalization with frozen per-channel statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (m, n) = self.mat(x);
        if self.value(gamma).len() != n
            || self.value(beta).len() != n
            || running_mean.len() != n
            || running_var.len() != n
        {
            return Err(self.shape_err("batch_norm", x, gamma));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let i = r * n + c;
                let h = (src[i] - running_mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
        ))
    }

    /// Inverted dropout; identity on an evaluation tape or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Invalid(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut t = self.value(x).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    // ----- sequence and attention --------------------------------------

    /// Causal temporal convolution over independent sequences.
    ///
    /// `x` is `[groups * group_len, d_in]`, `kernel` is `[k, d_in, d_out]`.
    /// Each sequence is left-padded with `k - 1` zero rows, so output step `t`
    /// reads input steps `t - k + 1 ..= t` of its own sequence only.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, group_len: usize) -> Result<Var> {
        self.conv1d_shifted(x, kernel, group_len, 0)
    }

    /// Like [`Tape::causal_conv1d`] with the window moved `lookahead` steps
    /// into the future. Only used to build deliberately non-causal variants.
    pub fn conv1d_shifted(
        &mut self,
        x: Var,
        kernel: Var,
        group_len: usize,
        lookahead: usize,
    ) -> Result<Var> {
        let (m, d_in) = self.mat(x);
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != d_in {
            return Err(self.shape_err("causal_conv1d", x, kernel));
        }
        let (k, d_out) = (ks[0], ks[2]);
        if k == 0 {
            return Err(NumericsError::Invalid(
                "causal_conv1d: kernel size must be positive".into(),
            ));
        }
        if group_len == 0 || m % group_len != 0 {
            return Err(NumericsError::Invalid(format!(
                "causal_conv1d: {m} rows are not a multiple of sequence length {group_len}"
            )));
        }
        let src = self.value(x).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; m * d_out];
        for_each_tap(m, group_len, k, lookahead, |row, src_row, s| {
            let xin = &src[src_row * d_in..(src_row + 1) * d_in];
            let orow = &mut out[row * d_out..(row + 1) * d_out];
            let ws = &w[s * d_in * d_out..(s + 1) * d_in * d_out];
            for (c, &xv) in xin.iter().enumerate() {
                let wrow = &ws[c * d_out..(c + 1) * d_out];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        });
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::new(vec![m, d_out], out)?,
            rg,
            Op::CausalConv {
                x,
                kernel,
                group_len,
                lookahead,
            },
        ))
    }

    /// Multi-head scaled dot-product attention: query row `r` attends to the
    /// key/value rows listed in `keys.keys(r)`. Queries with no keys yield a
    /// zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Arc<KeySets>,
    ) -> Result<Var> {
        let (nq, dk) = self.mat(q);
        let (nk, dk2) = self.mat(k);
        let (nv, dv) = self.mat(v);
        if dk != dk2 {
            return Err(self.shape_err("attention(q,k)", q, k));
        }
        if nk != nv {
            return Err(self.shape_err("attention(k,v)", k, v));
        }
        if heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return Err(NumericsError::Invalid(format!(
                "attention: width {dk}/{dv} not divisible by {heads} heads"
            )));
        }
        if keys.num_queries() != nq {
            return Err(NumericsError::Invalid(format!(
                "attention: {} key sets for {nq} queries",
                keys.num_queries()
            )));
        }
        if keys.max_key().is_some_and(|j| j >= nk) {
            return Err(NumericsError::Invalid(format!(
                "attention: key index out of range for {nk} keys"
            )));
        }
        let dims = AttentionDims { nq, dk, dv, heads };
        let (out, weights) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &keys,
            &dims,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![nq, dv], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                weights,
            },
        ))
    }

    /// Attention probabilities of query `r`, head `h`, aligned with
    /// `keys.keys(r)`; `None` if `out` is not an attention node.
    pub fn attention_weights(&self, out: Var, r: usize, h: usize) -> Option<&[f64]> {
        match &self.nodes[out.0].op {
            Op::Attention {
                heads,
                keys,
                weights,
                ..
            } => {
                let base = attention::weight_index(keys, *heads, r, h, 0);
                Some(&weights[base..base + keys.keys(r).len()])
            }
            _ => None,
        }
    }

    /// Name of the first primitive whose forward value is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| op_name(&n.op))
    }

    // ----- backward -----------------------------------------------------

    /// Back-propagates from a scalar and adds the result into the leaf
    /// gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NumericsError::NonFinite(op_name(&node.op)));
            }
            backprop(&self.nodes, idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Accumulated gradient of a leaf. `None` for constants or leaves that the
    /// loss does not reach.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulated gradients of every parameter leaf, in creation order.
    pub fn param_grads(&self) -> ParamGrads {
        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if node.requires_grad {
                    let g = self
                        .grad(Var(idx))
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    entries.push((id, g));
                }
            }
        }
        ParamGrads { entries }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::ScaleRows(..) => "scale_rows",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Unary(_, u) => u.name(),
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::Reshape(_) => "reshape",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
        Op::Dropout { .. } => "dropout",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::CausalConv { .. } => "causal_conv1d",
        Op::Attention { .. } => "attention",
    }
}

/// Calls `f(out_row, in_row, tap)` for every in-range tap of a grouped causal
/// convolution.
fn for_each_tap(
    rows: usize,
    group_len: usize,
    k: usize,
    lookahead: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    for row in 0..rows {
        let g0 = row - row % group_len;
        let t = (row % group_len) as isize;
        for s in 0..k {
            let src = t + s as isize + lookahead as isize - (k as isize - 1);
            if src < 0 || src >= group_len as isize {
                continue;
            }
            f(row, g0 + src as usize, s);
        }
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da += dc . b^T` for `dc [m, n]`, `b [k, n]`.
fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += a^T . dc` for `a [m, k]`, `dc [m, n]`.
fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let dst = &mut db[p * n..(p + 1) * n];
            for (d, g) in dst.iter_mut().zip(drow) {
                *d += aip * g;
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Adds `scale * g` into the gradient buffer of `v`, if it has one.
fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
    if let Some(d) = slot(nodes, grads, v) {
        for (a, b) in d.iter_mut().zip(g) {
            *a += scale * b;
        }
    }
}

fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    let mat = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = mat(*a);
            let n = mat(*b).1;
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                matmul_grad_a(g, val(*b), &mut da, m, k, n);
                add_into(nodes, grads, *a, &da, 1.0);
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                matmul_grad_b(val(*a), g, &mut db, m, k, n);
                add_into(nodes, grads, *b, &db, 1.0);
            }
        }
        Op::Linear { x, w, b } => {
            let (m, k) = mat(*x);
            let n = mat(*w).1;
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; m * k];
                matmul_grad_a(g, val(*w), &mut dx, m, k, n);
                add_into(nodes, grads, *x, &dx, 1.0);
            }
            if nodes[w.0].requires_grad {
                let mut dw = vec![0.0; k * n];
                matmul_grad_b(val(*x), g, &mut dw, m, k, n);
                add_into(nodes, grads, *w, &dw, 1.0);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let d: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                add_into(nodes, grads, *a, &d, 1.0);
            }
            if nodes[b.0].requires_grad {
                let d: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                add_into(nodes, grads, *b, &d, 1.0);
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if nodes[a.0].requires_grad {
                let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x / y).collect();
                add_into(nodes, grads, *a, &d, 1.0);
            }
            if nodes[b.0].requires_grad {
                let out = node.value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.iter().zip(bv))
                    .map(|(x, (o, y))| -x * o / y)
                    .collect();
                add_into(nodes, grads, *b, &d, 1.0);
            }
        }
        Op::AddRow(x, row) => {
            add_into(nodes, grads, *x, g, 1.0);
            let n = mat(*x).1;
            if let Some(d) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
        }
        Op::MulRow(x, row) => {
            let n = mat(*x).1;
            let r = val(*row);
            if nodes[x.0].requires_grad {
                let d: Vec<f64> = g
                    .chunks(n)
                    .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a * b))
                    .collect();
                add_into(nodes, grads, *x, &d, 1.0);
            }
            if nodes[row.0].requires_grad {
                let xv = val(*x);
                let mut d = vec![0.0; n];
                for (gc, xc) in g.chunks(n).zip(xv.chunks(n)) {
                    for c in 0..n {
                        d[c] += gc[c] * xc[c];
                    }
                }
                add_into(nodes, grads, *row, &d, 1.0);
            }
        }
        Op::ScaleRows(x, factors) => {
            let n = mat(*x).1.max(1);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((dc, gc), f) in d.chunks_mut(n).zip(g.chunks(n)).zip(factors.iter()) {
                    for (a, b) in dc.iter_mut().zip(gc) {
                        *a += f * b;
                    }
                }
            }
        }
        Op::Scale(x, c) => add_into(nodes, grads, *x, g, *c),
        Op::AddScalar(x) | Op::Reshape(x) => add_into(nodes, grads, *x, g, 1.0),
        Op::Unary(x, f) => {
            let xv = val(*x);
            let yv = node.value.data();
            let d: Vec<f64> = g
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(gv, (a, b))| gv * f.derivative(*a, *b))
                .collect();
            add_into(nodes, grads, *x, &d, 1.0);
        }
        Op::ConcatCols(parts) => {
            let (m, n) = (node.value.rows(), node.value.cols());
            let mut col = 0;
            for &p in parts {
                let w = mat(p).1;
                if let Some(d) = slot(nodes, grads, p) {
                    for r in 0..m {
                        for c in 0..w {
                            d[r * w + c] += g[r * n + col + c];
                        }
                    }
                }
                col += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                add_into(nodes, grads, p, &g[off..off + len], 1.0);
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let (m, n) = mat(*x);
            let w = node.value.cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for r in 0..m {
                    for c in 0..w {
                        d[r * n + start + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::GatherRows { x, index } => {
            let n = mat(*x).1;
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..n {
                        d[i * n + c] += g[r * n + c];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let n = node.value.cols().max(1);
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    dr[c] = yr[c] * (gr[c] - inner);
                }
            }
            add_into(nodes, grads, *x, &d, 1.0);
        }
        Op::LogSoftmax(x) => {
            let n = node.value.cols().max(1);
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let total: f64 = gr.iter().sum();
                for c in 0..n {
                    dr[c] = gr[c] - yr[c].exp() * total;
                }
            }
            add_into(nodes, grads, *x, &d, 1.0);
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            add_into(nodes, grads, *x, &vec![g[0]; n], 1.0);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            add_into(nodes, grads, *x, &vec![g[0] / n as f64; n], 1.0);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (m, n) = mat(*x);
            let gm = val(*gamma);
            norm_affine_grads(nodes, grads, *gamma, *beta, g, xhat, n);
            if let Some(d) = slot(nodes, grads, *x) {
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        let dh = gr[c] * gm[c];
                        s1 += dh;
                        s2 += dh * hr[c];
                    }
                    let nn = n as f64;
                    for c in 0..n {
                        let dh = gr[c] * gm[c];
                        d[r * n + c] += rstd[r] / nn * (nn * dh - s1 - hr[c] * s2);
                    }
                }
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            group_len,
            xhat,
            rstd,
        } => {
            let (m, n) = mat(*x);
            let gm = val(*gamma);
            norm_affine_grads(nodes, grads, *gamma, *beta, g, xhat, n);
            if let Some(d) = slot(nodes, grads, *x) {
                let l = *group_len;
                let lf = l as f64;
                for grp in 0..m / l {
                    for c in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for t in 0..l {
                            let i = (grp * l + t) * n + c;
                            let dh = g[i] * gm[c];
                            s1 += dh;
                            s2 += dh * xhat[i];
                        }
                        let s = rstd[grp * n + c];
                        for t in 0..l {
                            let i = (grp * l + t) * n + c;
                            let dh = g[i] * gm[c];
                            d[i] += s / lf * (lf * dh - s1 - xhat[i] * s2);
                        }
                    }
                }
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        } => {
            let n = mat(*x).1;
            let gm = val(*gamma);
            norm_affine_grads(nodes, grads, *gamma, *beta, g, xhat, n);
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, (dv, gv)) in d.iter_mut().zip(g).enumerate() {
                    let c = i % n;
                    *dv += gv * gm[c] * inv_std[c];
                }
            }
        }
        Op::Dropout { x, mask } => {
            let d: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
            add_into(nodes, grads, *x, &d, 1.0);
        }
        Op::CausalConv {
            x,
            kernel,
            group_len,
            lookahead,
        } => {
            let (m, d_in) = mat(*x);
            let ks = nodes[kernel.0].value.shape();
            let (k, d_out) = (ks[0], ks[2]);
            let xv = val(*x);
            let wv = val(*kernel);
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; m * d_in];
                for_each_tap(m, *group_len, k, *lookahead, |row, src, s| {
                    let grow = &g[row * d_out..(row + 1) * d_out];
                    let ws = &wv[s * d_in * d_out..(s + 1) * d_in * d_out];
                    for c in 0..d_in {
                        let wrow = &ws[c * d_out..(c + 1) * d_out];
                        dx[src * d_in + c] +=
                            grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                add_into(nodes, grads, *x, &dx, 1.0);
            }
            if nodes[kernel.0].requires_grad {
                let mut dw = vec![0.0; k * d_in * d_out];
                for_each_tap(m, *group_len, k, *lookahead, |row, src, s| {
                    let grow = &g[row * d_out..(row + 1) * d_out];
                    let xin = &xv[src * d_in..(src + 1) * d_in];
                    for (c, &xc) in xin.iter().enumerate() {
                        let dst = &mut dw[(s * d_in + c) * d_out..(s * d_in + c + 1) * d_out];
                        for (dd, gv) in dst.iter_mut().zip(grow) {
                            *dd += xc * gv;
                        }
                    }
                });
                add_into(nodes, grads, *kernel, &dw, 1.0);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            keys,
            weights,
        } => {
            let (nq, dk) = mat(*q);
            let dv = mat(*v).1;
            let dims = AttentionDims {
                nq,
                dk,
                dv,
                heads: *heads,
            };
            let mut dq = nodes[q.0].requires_grad.then(|| vec![0.0; nq * dk]);
            let mut dkb = nodes[k.0]
                .requires_grad
                .then(|| vec![0.0; nodes[k.0].value.len()]);
            let mut dvb = nodes[v.0]
                .requires_grad
                .then(|| vec![0.0; nodes[v.0].value.len()]);
            attention::backward(
                val(*q),
                val(*k),
                val(*v),
                keys,
                &dims,
                weights,
                g,
                AttentionGrads {
                    dq: dq.as_deref_mut(),
                    dk: dkb.as_deref_mut(),
                    dv: dvb.as_deref_mut(),
                },
            );
            if let Some(d) = dq {
                add_into(nodes, grads, *q, &d, 1.0);
            }
            if let Some(d) = dkb {
                add_into(nodes, grads, *k, &d, 1.0);
            }
            if let Some(d) = dvb {
                add_into(nodes, grads, *v, &d, 1.0);
            }
        }
    }
}

fn norm_affine_grads(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gamma: Var,
    beta: Var,
    g: &[f64],
    xhat: &[f64],
    n: usize,
) {
    if nodes[gamma.0].requires_grad {
        let mut dg = vec![0.0; n];
        for (i, (gv, h)) in g.iter().zip(xhat).enumerate() {
            dg[i % n] += gv * h;
        }
        add_into(nodes, grads, gamma, &dg, 1.0);
    }
    if nodes[beta.0].requires_grad {
        let mut db = vec![0.0; n];
        for (i, gv) in g.iter().enumerate() {
            db[i % n] += gv;
        }
        add_into(nodes, grads, beta, &db, 1.0);
    }
}
