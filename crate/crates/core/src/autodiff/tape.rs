//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs do not require gradients are recorded as constants, so a forward
//! pass over detached parameters costs no backward bookkeeping.

use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Floor applied to the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Variance epsilon of row-wise layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operations selectable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
}

/// Cross-entropy target for a single row of logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Index(usize),
    OneHot(Vec<f64>),
}

#[derive(Debug)]
enum Targets {
    Index(Vec<usize>),
    Dense(Vec<f64>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddRow { x: Var, bias: Var, cols: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Gather { src: Var, indices: Vec<usize>, cols: usize },
    ConcatCols { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    Reshape { x: Var },
    SoftmaxRows { x: Var, cols: usize },
    MaskedSoftmaxRows { x: Var, cols: usize },
    CrossEntropyRows { x: Var, cols: usize, probs: Vec<f64>, targets: Targets },
    CosineRows { u: Var, v: Var, cols: usize, nu: Vec<f64>, nv: Vec<f64>, floored: Vec<bool> },
    Sum { x: Var },
    Mean { x: Var },
    Expectile { u: Var, tau: f64 },
    BlockDot { q: Var, k: Var, block: usize, cols: usize },
    BlockWeightedSum { w: Var, v: Var, block: usize, cols: usize },
    LayerNormRows { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            ConcatCols { a, b, .. } => vec![*a, *b],
            Scale { x, .. }
            | Relu { x }
            | Sigmoid { x }
            | Tanh { x }
            | Reshape { x }
            | SoftmaxRows { x, .. }
            | MaskedSoftmaxRows { x, .. }
            | CrossEntropyRows { x, .. }
            | Sum { x }
            | Mean { x } => vec![*x],
            AddRow { x, bias, .. } => vec![*x, *bias],
            Gather { src, .. } => vec![*src],
            CosineRows { u, v, .. } => vec![*u, *v],
            Expectile { u, .. } => vec![*u],
            BlockDot { q, k, .. } => vec![*q, *k],
            BlockWeightedSum { w, v, .. } => vec![*w, *v],
            LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations; inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    cosine_floor_hits: usize,
}

fn check_same_shape(a: &Array, b: &Array, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64], out_probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &x) in out_probs.iter_mut().zip(row) {
        let e = (x - max).exp();
        *p = e;
        sum += e;
    }
    for p in out_probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
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

    /// Number of cosine evaluations whose denominator hit [`COSINE_EPS`].
    pub fn cosine_floor_hits(&self) -> usize {
        self.cosine_floor_hits
    }

    /// Drops every node recorded after the first `len`, e.g. to reuse bound
    /// parameters across evaluation batches. Gradients are cleared.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    ///
    /// `None` when `v` does not require gradients or no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref op => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an array; with `requires_grad` it becomes a differentiable leaf.
    pub fn array(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let a = Array::new(shape, values)?;
        Ok(self.leaf(a, requires_grad))
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.push(value, op)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).matrix_dims()?;
        let (k2, m) = self.value(b).matrix_dims()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: [{n}x{k}] times [{k2}x{m}]"
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Array::new(&[n, m], out)?, Op::MatMul { a, b, n, k, m }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Array {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        Array::new(v.shape(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |t| c * t);
        self.push(out, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |t| if t > 0.0 { t } else { 0.0 });
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |t| {
            if t >= 0.0 {
                1.0 / (1.0 + (-t).exp())
            } else {
                let e = t.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Tanh => Ok(self.tanh(inputs[0])),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }

    /// Adds a bias vector `[c]` to every row of `x` `[r, c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(format!(
                "add_row: bias {:?} for {c} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(Array::new(&[r, c], out)?, Op::AddRow { x, bias, cols: c }))
    }

    /// Gathers rows of `src` `[n, c]`; out-of-range indices are lookup errors.
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let (n, c) = self.value(src).matrix_dims()?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::Lookup {
                    index: i,
                    max: n.saturating_sub(1),
                });
            }
            out.extend_from_slice(self.value(src).row(i));
        }
        let value = Array::new(&[indices.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                src,
                indices: indices.to_vec(),
                cols: c,
            },
        ))
    }

    /// Row lookup into an embedding table `[|I|+1, d]`; row 0 is padding.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &idx)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).matrix_dims()?;
        let (rb, cb) = self.value(b).matrix_dims()?;
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let value = Array::new(&[ra, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b, rows: ra, ca, cb }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let value = Array::new(shape, data)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what}: non-finite input")))
        }
    }

    /// Softmax over the last axis of a vector or each row of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols()?;
        if c == 0 {
            return Err(Error::shape("softmax over zero entries"));
        }
        self.check_finite(x, "softmax")?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        let value = Array::new(v.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxRows { x, cols: c }))
    }

    /// Row softmax restricted to entries where `mask` is true. Masked entries
    /// are zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols()?;
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(Error::shape("masked_softmax: mask length"));
        }
        let mut out = vec![0.0; v.len()];
        for ((row, m), o) in v.data().chunks(c).zip(mask.chunks(c)).zip(out.chunks_mut(c)) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ((oj, &xj), &keep) in o.iter_mut().zip(row).zip(m) {
                if keep {
                    *oj = (xj - max).exp();
                    sum += *oj;
                }
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        let value = Array::new(v.shape(), out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmaxRows { x, cols: c },
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: &Target) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape(format!("cross_entropy expects a vector, got {shape:?}")));
        }
        let out = match target {
            Target::Index(i) => self.cross_entropy_rows(logits, &[*i])?,
            Target::OneHot(y) => self.cross_entropy_rows_dense(logits, y)?,
        };
        self.reshape(out, &[])
    }

    /// Per-row cross-entropy against class indices; returns `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).rows_cols()?;
        if targets.len() != r {
            return Err(Error::shape(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(format!("target class {t} outside [0, {c})")));
        }
        self.check_finite(logits, "cross_entropy")?;
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut out = Vec::with_capacity(r);
        for ((row, p), &t) in v.data().chunks(c).zip(probs.chunks_mut(c)).zip(targets) {
            let lse = log_softmax_row(row, p);
            out.push(lse - row[t]);
        }
        Ok(self.push(
            Array::vector(out),
            Op::CrossEntropyRows {
                x: logits,
                cols: c,
                probs,
                targets: Targets::Index(targets.to_vec()),
            },
        ))
    }

    /// Per-row cross-entropy `-Σ y log softmax(x)` against dense target rows.
    pub fn cross_entropy_rows_dense(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (r, c) = self.value(logits).rows_cols()?;
        if targets.len() != r * c {
            return Err(Error::shape("dense targets do not match logits"));
        }
        if targets.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(Error::shape("dense targets must lie in [0, 1]"));
        }
        self.check_finite(logits, "cross_entropy")?;
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut out = Vec::with_capacity(r);
        for ((row, p), y) in v.data().chunks(c).zip(probs.chunks_mut(c)).zip(targets.chunks(c)) {
            let lse = log_softmax_row(row, p);
            let loss: f64 = row
                .iter()
                .zip(y)
                .filter(|(_, &yj)| yj != 0.0)
                .map(|(&xj, &yj)| yj * (lse - xj))
                .sum();
            out.push(loss);
        }
        Ok(self.push(
            Array::vector(out),
            Op::CrossEntropyRows {
                x: logits,
                cols: c,
                probs,
                targets: Targets::Dense(targets.to_vec()),
            },
        ))
    }

    /// Cosine similarity of two vectors (scalar) or of matching rows (`[rows]`).
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        check_same_shape(self.value(u), self.value(v), "cosine")?;
        let vector = self.value(u).shape().len() == 1;
        let (r, c) = self.value(u).rows_cols()?;
        let (mut nu, mut nv, mut floored) = (Vec::with_capacity(r), Vec::with_capacity(r), Vec::with_capacity(r));
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let (a, b) = (self.value(u).row(i), self.value(v).row(i));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = na * nb;
            let floor = denom < COSINE_EPS;
            out.push(dot / if floor { COSINE_EPS } else { denom });
            nu.push(na);
            nv.push(nb);
            floored.push(floor);
        }
        self.cosine_floor_hits += floored.iter().filter(|&&f| f).count();
        let value = if vector { Array::scalar(out[0]) } else { Array::vector(out) };
        Ok(self.push(
            value,
            Op::CosineRows {
                u,
                v,
                cols: c,
                nu,
                nv,
                floored,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty array"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Array::scalar(s / n as f64), Op::Mean { x }))
    }

    /// Elementwise asymmetric squared loss `|tau - 1(u < 0)| * u^2`.
    pub fn expectile(&mut self, u: Var, tau: f64) -> Var {
        let out = self.map(u, |t| expectile_weight(t, tau) * t * t);
        self.push(out, Op::Expectile { u, tau })
    }

    /// `out[n, j] = q[n] · k[n * block + j]` for `q` `[N, d]` and `k` `[N*block, d]`.
    pub fn block_dot(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        let (n, d) = self.value(q).matrix_dims()?;
        let (nk, dk) = self.value(k).matrix_dims()?;
        if dk != d || nk != n * block {
            return Err(Error::shape(format!(
                "block_dot: q [{n}x{d}], k [{nk}x{dk}], block {block}"
            )));
        }
        let mut out = vec![0.0; n * block];
        for i in 0..n {
            let qi = self.value(q).row(i);
            for j in 0..block {
                let kj = self.value(k).row(i * block + j);
                out[i * block + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            }
        }
        let value = Array::new(&[n, block], out)?;
        Ok(self.push(value, Op::BlockDot { q, k, block, cols: d }))
    }

    /// `out[n] = Σ_j w[n, j] * v[n * block + j]` for `w` `[N, block]`, `v` `[N*block, d]`.
    pub fn block_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (n, block) = self.value(w).matrix_dims()?;
        let (nv, d) = self.value(v).matrix_dims()?;
        if nv != n * block {
            return Err(Error::shape(format!(
                "block_weighted_sum: w [{n}x{block}], v [{nv}x{d}]"
            )));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let wi = self.value(w).row(i);
            let o = &mut out[i * d..(i + 1) * d];
            for (j, &wij) in wi.iter().enumerate() {
                if wij == 0.0 {
                    continue;
                }
                for (oo, &vv) in o.iter_mut().zip(self.nodes[v.0].value.row(i * block + j)) {
                    *oo += wij * vv;
                }
            }
        }
        let value = Array::new(&[n, d], out)?;
        Ok(self.push(value, Op::BlockWeightedSum { w, v, block, cols: d }))
    }

    /// Row-wise layer normalization with learned gain and bias `[c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("layer_norm: gain/bias shape"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..r {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let value = Array::new(&[r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                cols: c,
                xhat,
                inv_std,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, target: Var, f: impl FnOnce(&mut [f64], &Tape)) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let mut buf = self.grads[target.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(&mut buf, self);
        self.grads[target.0] = Some(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Ops are moved out temporarily so the accumulator closures can borrow the tape.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                self.acc(*a, |ga, t| gemm(n, m, k, g, false, t.value(*b).data(), true, ga, true));
                self.acc(*b, |gb, t| gemm(k, n, m, t.value(*a).data(), true, g, false, gb, true));
            }
            Op::Add { a, b } => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.acc(*a, |ga, t| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(t.value(*b).data()) {
                        *o += gi * bi;
                    }
                });
                self.acc(*b, |gb, t| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(t.value(*a).data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale { x, c } => self.acc(*x, |gx, _| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::AddRow { x, bias, cols } => {
                self.acc(*x, |gx, _| add_into(gx, g));
                self.acc(*bias, |gb, _| {
                    for row in g.chunks(*cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Relu { x } => self.acc(*x, |gx, t| {
                for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(t.value(*x).data()) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }),
            Op::Sigmoid { x } => self.acc(*x, |gx, t| {
                for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(t.nodes[id].value.data()) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh { x } => self.acc(*x, |gx, t| {
                for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(t.nodes[id].value.data()) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Gather { src, indices, cols } => self.acc(*src, |gs, _| {
                for (row, &i) in g.chunks(*cols).zip(indices) {
                    add_into(&mut gs[i * cols..(i + 1) * cols], row);
                }
            }),
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let w = ca + cb;
                self.acc(*a, |ga, _| {
                    for i in 0..*rows {
                        add_into(&mut ga[i * ca..(i + 1) * ca], &g[i * w..i * w + ca]);
                    }
                });
                self.acc(*b, |gb, _| {
                    for i in 0..*rows {
                        add_into(&mut gb[i * cb..(i + 1) * cb], &g[i * w + ca..(i + 1) * w]);
                    }
                });
            }
            Op::Reshape { x } => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::Sum { x } => self.acc(*x, |gx, _| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean { x } => self.acc(*x, |gx, _| {
                let s = g[0] / gx.len() as f64;
                for o in gx.iter_mut() {
                    *o += s;
                }
            }),
            Op::SoftmaxRows { x, cols } => self.acc(*x, |gx, t| {
                let y = t.nodes[id].value.data();
                for ((o, gr), yr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((oj, &gj), &yj) in o.iter_mut().zip(gr).zip(yr) {
                        *oj += yj * (gj - dot);
                    }
                }
            }),
            Op::MaskedSoftmaxRows { x, cols, .. } => self.acc(*x, |gx, t| {
                // Masked outputs are identically zero, so their gradient vanishes.
                let y = t.nodes[id].value.data();
                for ((o, gr), yr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((oj, &gj), &yj) in o.iter_mut().zip(gr).zip(yr) {
                        *oj += yj * (gj - dot);
                    }
                }
            }),
            Op::CrossEntropyRows { x, cols, probs, targets } => self.acc(*x, |gx, _| {
                let c = *cols;
                for (i, (o, p)) in gx.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    let gi = g[i];
                    match targets {
                        Targets::Index(t) => {
                            for (oj, &pj) in o.iter_mut().zip(p) {
                                *oj += gi * pj;
                            }
                            o[t[i]] -= gi;
                        }
                        Targets::Dense(y) => {
                            let yr = &y[i * c..(i + 1) * c];
                            let mass: f64 = yr.iter().sum();
                            for ((oj, &pj), &yj) in o.iter_mut().zip(p).zip(yr) {
                                *oj += gi * (mass * pj - yj);
                            }
                        }
                    }
                }
            }),
            Op::CosineRows { u, v, cols, nu, nv, floored } => {
                let c = *cols;
                let s = self.nodes[id].value.data().to_vec();
                let (u, v) = (*u, *v);
                let grad_for = |gx: &mut [f64], t: &Tape, this: Var, other: Var, nthis: &[f64], nother: &[f64]| {
                    for i in 0..s.len() {
                        let (a, b) = (t.value(this).row(i), t.value(other).row(i));
                        let o = &mut gx[i * c..(i + 1) * c];
                        if floored[i] {
                            for (oj, &bj) in o.iter_mut().zip(b) {
                                *oj += g[i] * bj / COSINE_EPS;
                            }
                        } else {
                            let inv = 1.0 / (nthis[i] * nother[i]);
                            let self_term = s[i] / (nthis[i] * nthis[i]);
                            for ((oj, &aj), &bj) in o.iter_mut().zip(a).zip(b) {
                                *oj += g[i] * (bj * inv - self_term * aj);
                            }
                        }
                    }
                };
                self.acc(u, |gu, t| grad_for(gu, t, u, v, nu, nv));
                self.acc(v, |gv, t| grad_for(gv, t, v, u, nv, nu));
            }
            Op::Expectile { u, tau } => self.acc(*u, |gu, t| {
                for ((o, &gi), &ui) in gu.iter_mut().zip(g).zip(t.value(*u).data()) {
                    *o += gi * 2.0 * expectile_weight(ui, *tau) * ui;
                }
            }),
            Op::BlockDot { q, k, block, cols } => {
                let (block, d) = (*block, *cols);
                let n = g.len() / block.max(1);
                self.acc(*q, |gq, t| {
                    for i in 0..n {
                        let o = &mut gq[i * d..(i + 1) * d];
                        for j in 0..block {
                            let gij = g[i * block + j];
                            for (oo, &kk) in o.iter_mut().zip(t.value(*k).row(i * block + j)) {
                                *oo += gij * kk;
                            }
                        }
                    }
                });
                self.acc(*k, |gk, t| {
                    for i in 0..n {
                        let qi = t.value(*q).row(i);
                        for j in 0..block {
                            let gij = g[i * block + j];
                            let r = i * block + j;
                            for (oo, &qq) in gk[r * d..(r + 1) * d].iter_mut().zip(qi) {
                                *oo += gij * qq;
                            }
                        }
                    }
                });
            }
            Op::BlockWeightedSum { w, v, block, cols } => {
                let (block, d) = (*block, *cols);
                let n = g.len() / d.max(1);
                self.acc(*w, |gw, t| {
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..block {
                            let vr = t.value(*v).row(i * block + j);
                            gw[i * block + j] += gi.iter().zip(vr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                self.acc(*v, |gv, t| {
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        let wi = t.value(*w).row(i);
                        for (j, &wij) in wi.iter().enumerate() {
                            let r = i * block + j;
                            for (oo, &gg) in gv[r * d..(r + 1) * d].iter_mut().zip(gi) {
                                *oo += wij * gg;
                            }
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gamma, beta, cols, xhat, inv_std } => {
                let c = *cols;
                self.acc(*gamma, |gg, _| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &gj), &hj) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gj * hj;
                        }
                    }
                });
                self.acc(*beta, |gb, _| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
                self.acc(*x, |gx, t| {
                    let gam = t.value(*gamma).data();
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[i] / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += scale * (c as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `|tau - 1(u < 0)|`.
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}
