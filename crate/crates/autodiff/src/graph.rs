//! Tape of recorded operations and the reverse sweep over it.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, which is already a topological order, so the backward
//! pass is a single reverse scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use crate::{AutodiffError, ParamId, ParamStore, Result, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Pinball {
        pred: Var,
        target: Vec<f64>,
        quantiles: Vec<f64>,
    },
    GaussianNll {
        mu: Var,
        sigma: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Pinball { .. } => "pinball_loss",
            Op::GaussianNll { .. } => "gaussian_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Training mode enables dropout.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training graph with dropout masks drawn from a generator seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    pub fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
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

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// A constant input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradients (used for input-gradient checks).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter into the graph. Repeated loads of one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_matrix(m, n, out), Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_matrix(m, n, out), Op::MatMulNt(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, rv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += rv;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a (m x n)` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(self.mismatch("mul_col", a, col));
        }
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, cv) in c.iter().enumerate() {
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o *= cv;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let ng = self.needs(a);
        self.push(out, Op::Elu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`
    /// (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.dims(beta) != (1, n) {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Inverted dropout; identity outside training mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
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
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        )?;
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Selects rows of `x` by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_matrix(idx.len(), n, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Embedding lookup: rows of `table` selected by category index.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_matrix(times * m, n, out),
            Op::TileRows { x, times },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_matrix(m, total, out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pm;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_matrix(rows, n, out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_matrix(m, len, out),
            Op::SliceCols { x, start },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(x);
        self.push(
            Tensor::from_matrix(len, n, out),
            Op::SliceRows { x, start },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Mean pinball loss of `pred (m x q)` against `target` (length `m`), one
    /// column per quantile level.
    pub fn pinball_loss(&mut self, pred: Var, target: &[f64], quantiles: &[f64]) -> Result<Var> {
        let (m, q) = self.dims(pred);
        if target.len() != m || quantiles.len() != q {
            return Err(AutodiffError::ShapeMismatch {
                op: "pinball_loss",
                lhs: vec![m, q],
                rhs: vec![target.len(), quantiles.len()],
            });
        }
        let p = self.value(pred).data();
        let mut total = 0.0;
        for i in 0..m {
            for (j, &ql) in quantiles.iter().enumerate() {
                total += pinball(ql, target[i] - p[i * q + j]);
            }
        }
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(total / (m * q) as f64),
            Op::Pinball {
                pred,
                target: target.to_vec(),
                quantiles: quantiles.to_vec(),
            },
            ng,
        )
    }

    /// Mean Gaussian negative log-likelihood; `mu` and `sigma` are `m x 1`.
    pub fn gaussian_nll(&mut self, mu: Var, sigma: Var, target: &[f64]) -> Result<Var> {
        let (m, _) = self.dims(mu);
        if self.dims(mu) != (m, 1) || self.dims(sigma) != (m, 1) || target.len() != m {
            return Err(self.mismatch("gaussian_nll", mu, sigma));
        }
        let mv = self.value(mu).data();
        let sv = self.value(sigma).data();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let total: f64 = (0..m)
            .map(|i| {
                let z = (target[i] - mv[i]) / sv[i];
                half_ln_2pi + sv[i].ln() + 0.5 * z * z
            })
            .sum();
        let ng = self.needs(mu) || self.needs(sigma);
        self.push(
            Tensor::scalar(total / m as f64),
            Op::GaussianNll {
                mu,
                sigma,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = matmul_nt_raw(gd, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_matrix(m, k, ga));
                }
                if self.needs(*b) {
                    let gb = matmul_tn_raw(self.value(*a).data(), gd, m, k, n);
                    self.acc(grads, *b, Tensor::from_matrix(k, n, gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.needs(*a) {
                    let ga = matmul_raw(gd, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_matrix(m, k, ga));
                }
                if self.needs(*b) {
                    let gb = matmul_tn_raw(gd, self.value(*a).data(), m, n, k);
                    self.acc(grads, *b, Tensor::from_matrix(n, k, gb));
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, g);
                self.acc_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, g);
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc_ref(grads, *a, g);
                if self.needs(*row) {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for r in gd.chunks(n) {
                        for (o, v) in gr.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *row, Tensor::from_matrix(1, n, gr));
                }
            }
            Op::MulCol(a, col) => {
                let n = g.cols();
                let c = self.value(*col).data();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (i, cv) in c.iter().enumerate() {
                        for v in &mut ga.data_mut()[i * n..(i + 1) * n] {
                            *v *= cv;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.needs(*col) {
                    let av = self.value(*a).data();
                    let gc: Vec<f64> = (0..c.len())
                        .map(|i| {
                            gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(&av[i * n..(i + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.acc(grads, *col, Tensor::from_matrix(c.len(), 1, gc));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.map(|v| v * s));
                }
            }
            Op::AddScalar(a) => self.acc_ref(grads, *a, g),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Elu(a) => {
                let x = self.value(*a);
                let gx = Tensor::from_matrix(
                    x.rows(),
                    x.cols(),
                    gd.iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((gv, xv), yv)| if *xv > 0.0 { *gv } else { gv * (yv + 1.0) })
                        .collect(),
                );
                self.acc(grads, *a, gx);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gv, e| gv * e)),
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                for ((grow, yrow), orow) in gd.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, Tensor::from_matrix(y.rows(), n, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (y.rows(), y.cols());
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::from_matrix(1, n, gg));
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; n];
                    for r in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *beta, Tensor::from_matrix(1, n, gb));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xh = 0.0;
                        for j in 0..n {
                            let gh = gd[i * n + j] * gam[j];
                            sum_gh += gh;
                            sum_gh_xh += gh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let gh = gd[i * n + j] * gam[j];
                            gx[i * n + j] = inv_std[i] / nf
                                * (nf * gh - sum_gh - xhat[i * n + j] * sum_gh_xh);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_matrix(m, n, gx));
                }
            }
            Op::Dropout { x, mask } => {
                let gx = Tensor::from_matrix(
                    g.rows(),
                    g.cols(),
                    gd.iter().zip(mask).map(|(a, b)| a * b).collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let mut gx = vec![0.0; m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gx[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *x, Tensor::from_matrix(m, n, gx));
                }
            }
            Op::TileRows { x, times } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let mut gx = vec![0.0; m * n];
                    for t in 0..*times {
                        for (o, v) in gx.iter_mut().zip(&gd[t * m * n..(t + 1) * m * n]) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *x, Tensor::from_matrix(m, n, gx));
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, p, Tensor::from_matrix(m, w, gp));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pm = self.dims(p).0;
                    if self.needs(p) {
                        let gp = gd[off * n..(off + pm) * n].to_vec();
                        self.acc(grads, p, Tensor::from_matrix(pm, n, gp));
                    }
                    off += pm;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = g.cols();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, Tensor::from_matrix(m, n, gx));
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let mut gx = vec![0.0; m * n];
                gx[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, Tensor::from_matrix(m, n, gx));
            }
            Op::SumAll(x) => {
                let t = self.value(*x);
                self.acc(grads, *x, Tensor::from_matrix(t.rows(), t.cols(), vec![gd[0]; t.len()]));
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let v = gd[0] / t.len() as f64;
                self.acc(grads, *x, Tensor::from_matrix(t.rows(), t.cols(), vec![v; t.len()]));
            }
            Op::Pinball {
                pred,
                target,
                quantiles,
            } => {
                let p = self.value(*pred);
                let q = quantiles.len();
                let scale = gd[0] / p.len() as f64;
                let mut gp = vec![0.0; p.len()];
                for (i, t) in target.iter().enumerate() {
                    for (j, &ql) in quantiles.iter().enumerate() {
                        let e = t - p.data()[i * q + j];
                        gp[i * q + j] = scale * if e >= 0.0 { -ql } else { 1.0 - ql };
                    }
                }
                self.acc(grads, *pred, Tensor::from_matrix(p.rows(), q, gp));
            }
            Op::GaussianNll { mu, sigma, target } => {
                let mv = self.value(*mu).data();
                let sv = self.value(*sigma).data();
                let m = target.len();
                let scale = gd[0] / m as f64;
                if self.needs(*mu) {
                    let gm = (0..m)
                        .map(|i| -scale * (target[i] - mv[i]) / (sv[i] * sv[i]))
                        .collect();
                    self.acc(grads, *mu, Tensor::from_matrix(m, 1, gm));
                }
                if self.needs(*sigma) {
                    let gs = (0..m)
                        .map(|i| {
                            let r = target[i] - mv[i];
                            scale * (1.0 / sv[i] - r * r / sv[i].powi(3))
                        })
                        .collect();
                    self.acc(grads, *sigma, Tensor::from_matrix(m, 1, gs));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` if the node was not reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// One gradient per parameter in `store`; parameters the loss does not
    /// reach get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => store.get(id).zeros_like(),
            })
            .collect()
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Pinball loss of a single residual `e = y - y_hat` at quantile level `q`.
pub fn pinball(q: f64, e: f64) -> f64 {
    (q * e).max((q - 1.0) * e)
}
