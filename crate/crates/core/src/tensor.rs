//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends one node to the [`Tape`].
//! Nodes only ever reference earlier nodes, so the tape order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to two cases: adding a bias over the last
//! dimension and scaling by a per-last-dimension vector. Everything else
//! requires exactly matching shapes.

use std::fmt;

use thiserror::Error;

/// Epsilon used by every normalization in the crate.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tensor ──────────────────────────────────────────────────────────

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Per-row mean and population standard deviation over the last dimension.
pub fn layer_norm_stats(x: &Tensor) -> (Tensor, Tensor) {
    let h = x.last_dim();
    let rows = x.rows();
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for row in x.data.chunks_exact(h) {
        let (mu, var) = row_moments(row);
        mean.push(mu);
        std.push(var.sqrt());
    }
    let stat_shape = if x.shape.len() == 1 {
        vec![1]
    } else {
        x.shape[..x.shape.len() - 1].to_vec()
    };
    (
        Tensor {
            shape: stat_shape.clone(),
            data: mean,
        },
        Tensor {
            shape: stat_shape,
            data: std,
        },
    )
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Exact GeLU, `x·Φ(x)` with Φ the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// ── matrix kernels ──────────────────────────────────────────────────

/// `c += a · b` where a is m×k and b is k×n, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    // a stored as m×k (row-major) unless transposed, in which case stored k×m.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── Tape ────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking for [`Tape::attention`].
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    /// `batch × key_len` flags; `None` means every key is visible.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            Some(valid) => valid[b * self.key_len + j],
            None => true,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleLastDim(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Normalize { x: Var, rstd: Vec<f64> },
    Reshape(Var),
    Concat(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Nodes the root does not depend
/// on (or that do not require gradients) have no entry.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
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

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Attention probabilities `[batch, heads, query_len, key_len]` recorded
    /// by an attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[f64]> {
        self.attention_record(var).map(|(_, p)| p)
    }

    /// Masking spec and probabilities of an attention node.
    pub fn attention_record(&self, var: Var) -> Option<(&AttentionSpec, &[f64])> {
        match &self.nodes[var.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.variable(value)
        } else {
            self.constant(value)
        }
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape, data }, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape, data }, Op::Mul(a, b), rg, "mul")
    }

    fn last_dim_vector(&self, x: Var, v: Var, op: &'static str) -> Result<usize> {
        let h = self.value(x).last_dim();
        if self.value(v).len() != h {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(h)
    }

    /// Adds a length-`h` vector to every row of `x[..., h]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let h = self.last_dim_vector(x, bias, "add_bias")?;
        let b = &self.value(bias).data;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_exact_mut(h) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor { shape, data }, Op::AddBias(x, bias), rg, "add_bias")
    }

    /// Multiplies every row of `x[..., h]` elementwise by a length-`h` vector.
    pub fn scale_last_dim(&mut self, x: Var, scale: Var) -> Result<Var> {
        let h = self.last_dim_vector(x, scale, "scale_last_dim")?;
        let s = &self.value(scale).data;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_exact_mut(h) {
            for (o, ss) in row.iter_mut().zip(s) {
                *o *= ss;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, scale]);
        self.push(Tensor { shape, data }, Op::ScaleLastDim(x, scale), rg, "scale_last_dim")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), rg, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Gelu(x), rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Relu(x), rg, "relu")
    }

    /// `(x − μ) / sqrt(σ² + ε)` over the last dimension, no affine part.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let h = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xv.data.chunks_exact(h) {
            let (mu, var) = row_moments(row);
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|v| (v - mu) * r));
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Normalize { x, rstd }, rg, "normalize")
    }

    /// `γ ⊙ normalize(x) + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.normalize(x)?;
        let s = self.scale_last_dim(n, gamma)?;
        self.add_bias(s, beta)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Concatenates vectors (flattened) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let rg = self.rg(parts);
        let n = data.len();
        self.push(Tensor { shape: vec![n], data }, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Row lookup: `table[V×h]`, ids → `[ids.len() × h]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table, "gather_rows")?;
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor { shape: vec![ids.len(), h], data },
            Op::Gather { table, ids: ids.to_vec() },
            rg,
            "gather_rows",
        )
    }

    /// Multi-head scaled dot-product attention over flattened rows.
    ///
    /// `q` is `[batch·query_len × h]`, `k` and `v` are `[batch·key_len × h]`.
    /// Queries with no visible key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, h) = self.dims2(q, "attention")?;
        let (kr, hk) = self.dims2(k, "attention")?;
        if qr != spec.batch * spec.query_len
            || kr != spec.batch * spec.key_len
            || hk != h
            || self.shape(v) != self.shape(k)
            || h % spec.heads != 0
        {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let dh = h / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (n, m) = (spec.query_len, spec.key_len);
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let mut probs = vec![0.0; spec.batch * spec.heads * n * m];
        let mut out = vec![0.0; qr * h];
        let mut scores = vec![0.0; m];
        for b in 0..spec.batch {
            for hd in 0..spec.heads {
                let off = hd * dh;
                for i in 0..n {
                    let qi = &qd[(b * n + i) * h + off..(b * n + i) * h + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if spec.visible(b, i, j) {
                            let kj = &kd[(b * m + j) * h + off..(b * m + j) * h + off + dh];
                            *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            max = max.max(*s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((b * spec.heads + hd) * n + i) * m..][..m];
                    let mut z = 0.0;
                    for j in 0..m {
                        if spec.visible(b, i, j) {
                            prow[j] = (scores[j] - max).exp();
                            z += prow[j];
                        }
                    }
                    let orow = &mut out[(b * n + i) * h + off..(b * n + i) * h + off + dh];
                    for j in 0..m {
                        if prow[j] != 0.0 {
                            prow[j] /= z;
                            let vj = &vd[(b * m + j) * h + off..(b * m + j) * h + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vj) {
                                *o += prow[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor { shape: vec![qr, h], data: out },
            Op::Attention { q, k, v, spec, probs },
            rg,
            "attention",
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×V]`. Rows whose target is `None` are excluded from the mean.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len()],
            });
        }
        let ld = &self.value(logits).data;
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    extent: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]) && count > 0;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only expose gradients for leaves and nodes that asked for them.
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    gemm_acc(m, n, k, g, false, &bv.data, true, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    gemm_acc(k, m, n, &av.data, true, g, false, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let h = self.value(*bias).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks_exact(h) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ScaleLastDim(x, scale) => {
                let h = self.value(*scale).len();
                let sv = &self.value(*scale).data;
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for (grow, orow) in g.chunks_exact(h).zip(gx.chunks_exact_mut(h)) {
                        for ((o, gg), s) in orow.iter_mut().zip(grow).zip(sv) {
                            *o += gg * s;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    for (grow, xrow) in g.chunks_exact(h).zip(xv.chunks_exact(h)) {
                        for ((o, gg), xx) in gs.iter_mut().zip(grow).zip(xrow) {
                            *o += gg * xx;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
                }
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gg), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gg * gelu_grad_scalar(*xx);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gg), xx) in gx.iter_mut().zip(g).zip(xv) {
                        if *xx > 0.0 {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Normalize { x, rstd } => {
                let y = &node.value.data;
                let h = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    let hf = h as f64;
                    for (r, ((grow, yrow), orow)) in g
                        .chunks_exact(h)
                        .zip(y.chunks_exact(h))
                        .zip(gx.chunks_exact_mut(h))
                        .enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / hf;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / hf;
                        for ((o, gg), yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += rstd[r] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(o, v)| *o += v);
                    }
                    off += n;
                }
            }
            Op::Gather { table, ids } => {
                let h = self.value(*table).shape[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * h..(id + 1) * h]
                            .iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).shape[1];
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let h = self.shape(q)[1];
        let dh = h / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (n, m) = (spec.query_len, spec.key_len);
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; m];
        for b in 0..spec.batch {
            for hd in 0..spec.heads {
                let off = hd * dh;
                for i in 0..n {
                    let prow = &probs[((b * spec.heads + hd) * n + i) * m..][..m];
                    let gi = &g[(b * n + i) * h + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..m {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * m + j) * h + off..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let gvj = &mut gv[(b * m + j) * h + off..][..dh];
                        for (o, x) in gvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let qi_base = (b * n + i) * h + off;
                    for j in 0..m {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let kj_base = (b * m + j) * h + off;
                        for c in 0..dh {
                            gq[qi_base + c] += ds * kd[kj_base + c];
                            gk[kj_base + c] += ds * qd[qi_base + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn erf_oracle_gelu(x: f64) -> f64 {
        // Φ via the complementary error function, evaluated independently.
        x * 0.5 * libm::erfc(-x / 2f64.sqrt())
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - erf_oracle_gelu(10.0)).abs() < 1e-6);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        for x in [-2.0, -0.7, 0.3, 1.9] {
            assert!((gelu_scalar(x) - erf_oracle_gelu(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_hand_values() {
        let (mu, sd) = layer_norm_stats(&Tensor::vector(vec![1.0, 3.0]));
        assert_eq!(mu.data(), &[2.0]);
        assert_eq!(sd.data(), &[1.0]);
        let (mu, sd) = layer_norm_stats(&Tensor::vector(vec![5.0, 5.0]));
        assert_eq!(mu.data(), &[5.0]);
        assert_eq!(sd.data(), &[0.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let y = tape.normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn uniform_and_saturated_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let loss = tape.softmax_cross_entropy(logits, &[Some(2)]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        let mut row = vec![0.0; 4];
        row[1] = 1000.0;
        let logits = tape.constant(Tensor::matrix(1, 4, row).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[Some(1)]).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[Some(4)]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::MAX, f64::MAX]));
        assert!(matches!(tape.add(x, x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let unused = tape.variable(Tensor::vector(vec![0.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let q = tape.constant(Tensor::matrix(6, 4, data.clone()).unwrap());
        let spec = AttentionSpec {
            batch: 2,
            query_len: 3,
            key_len: 3,
            heads: 2,
            key_valid: Some(vec![true, true, false, true, true, true]),
            causal: true,
        };
        let out = tape.attention(q, q, q, spec).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for row in probs.chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // causal: first query sees only the first key
        assert_eq!(probs[0], 1.0);
        // padded key never receives weight
        assert_eq!(probs[2 * 3 + 2], 0.0);
    }
}
