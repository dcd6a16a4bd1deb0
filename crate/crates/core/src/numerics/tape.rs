//! Reverse-mode differentiation over whole-matrix primitives.
//!
//! Every primitive records its inputs on the [`Tape`] and carries a
//! hand-written adjoint. Fused primitives (layer norm, causal attention,
//! cross-entropy) save the intermediates their adjoints need.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{config_err, domain_err, Result};
use crate::numerics::matrix::{gemm, MatRef, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for batched causal attention over stacked sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    LnEps(Var, f64),
    Square(Var),
    Recip(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    RowSum(Var),
    OffDiagSum(Var),
    RowNormalize(Var),
    MaskDiagonal(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gelu(Var),
    GravityLogits {
        sim: Var,
        tau: f64,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Matrix,
    },
    CausalAttention {
        qkv: Var,
        shape: AttentionShape,
        dropout_mask: Option<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::LnEps(..) => "ln_eps",
            Op::Square(..) => "square",
            Op::Recip(..) => "recip",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ColMean(..) => "col_mean",
            Op::RowSum(..) => "row_sum",
            Op::OffDiagSum(..) => "off_diag_sum",
            Op::RowNormalize(..) => "row_normalize",
            Op::MaskDiagonal(..) => "mask_diagonal",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::GravityLogits { .. } => "gravity_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::LnEps(a, _)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ColMean(a)
            | Op::RowSum(a)
            | Op::OffDiagSum(a)
            | Op::RowNormalize(a)
            | Op::MaskDiagonal(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a) => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::GravityLogits { sim, .. } => vec![sim],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Embedding { table, .. } => vec![table],
            Op::Dropout { x, .. } => vec![x],
            Op::CausalAttention { qkv, .. } => vec![qkv],
        }
    }
}

/// Intermediates kept for the adjoint pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Norms(Vec<f64>),
    LayerNorm { xhat: Matrix, rstd: Vec<f64> },
    Probs(Matrix),
    AttentionProbs(Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
    saved: Saved,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// A tape is single-threaded and append-only; [`Tape::backward`] walks it in
/// reverse from a scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn softmax_row_into(src: &[f64], dst: &mut [f64]) -> Result<()> {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(domain_err!("softmax over a row with every entry masked"));
    }
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
    Ok(())
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable input (also how stop-gradient is expressed).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    /// Records `var`'s current value as a constant, cutting gradient flow.
    pub fn stop_gradient(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = {
            let nodes = &self.nodes;
            eval(&op, &|v: Var| &nodes[v.0].value)?
        };
        if value
            .data()
            .iter()
            .any(|x| x.is_nan() || *x == f64::INFINITY)
        {
            return Err(domain_err!("{} produced a non-finite value", op.name()));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            saved,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    /// Multiplies every entry of `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    /// `ln(a + eps)`
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LnEps(a, eps))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Recip(a))
    }

    /// `max(a, floor)` elementwise.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.push(Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Mean over rows, giving a 1×C row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::ColMean(a))
    }

    /// Sum over columns, giving an R×1 column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }

    /// Sum of all off-diagonal entries of a square matrix.
    pub fn off_diag_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::OffDiagSum(a))
    }

    /// Scales each row to unit L2 norm; a zero row is a domain error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNormalize(a))
    }

    /// Sets the diagonal of a square matrix to `-inf`.
    pub fn mask_diagonal(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MaskDiagonal(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with 1×H `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    /// `1 / (tau · max(1 - sim, eps))` elementwise.
    pub fn gravity_logits(&mut self, sim: Var, tau: f64, eps: f64) -> Result<Var> {
        if tau <= 0.0 || eps <= 0.0 {
            return Err(config_err!(
                "gravity logits need tau > 0 and eps > 0 (got {tau}, {eps})"
            ));
        }
        self.push(Op::GravityLogits { sim, tau, eps })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Elementwise product with a fixed mask (already inverse-scaled).
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        self.push(Op::Dropout { x, mask })
    }

    /// Multi-head causal self-attention over packed `[Q | K | V]` columns.
    ///
    /// `qkv` is `(batch·seq) × 3H`; the result is `(batch·seq) × H` with
    /// heads concatenated. `dropout_mask`, when given, holds one inverse-scaled
    /// keep mask entry per attention weight (`batch·heads·seq·seq`).
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        shape: AttentionShape,
        dropout_mask: Option<Vec<f64>>,
    ) -> Result<Var> {
        self.push(Op::CausalAttention {
            qkv,
            shape,
            dropout_mask,
        })
    }

    /// Recomputes every node from the leaves and reports whether each
    /// recomputed value is bit-identical to the recorded one.
    pub fn replay(&self) -> Result<bool> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        let mut identical = true;
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => eval(&node.op, &|v: Var| &values[v.0])?.0,
            };
            identical &= value
                .data()
                .iter()
                .zip(node.value.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            values.push(value);
        }
        Ok(identical)
    }

    /// Gradients of the 1×1 `output` with respect to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            return Err(config_err!(
                "backward needs a scalar output, got {:?}",
                out.value.shape()
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.adjoint(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (am, bm) = (val(a), val(b));
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let mut d = Matrix::zeros(am.rows(), am.cols());
                    let bt = MatRef::new(bm.data(), bm.cols() as isize, 1).t();
                    gemm(
                        g.rows(),
                        g.cols(),
                        am.cols(),
                        1.0,
                        MatRef::new(g.data(), g.cols() as isize, 1),
                        bt,
                        0.0,
                        d.data_mut(),
                        am.cols() as isize,
                        1,
                    );
                    acc(a, d);
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let mut d = Matrix::zeros(bm.rows(), bm.cols());
                    let at = MatRef::new(am.data(), am.cols() as isize, 1).t();
                    gemm(
                        am.cols(),
                        am.rows(),
                        g.cols(),
                        1.0,
                        at,
                        MatRef::new(g.data(), g.cols() as isize, 1),
                        0.0,
                        d.data_mut(),
                        bm.cols() as isize,
                        1,
                    );
                    acc(b, d);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (am, bm) = (val(a), val(b));
                if self.wants(a) {
                    // dA = G · B
                    let mut d = Matrix::zeros(am.rows(), am.cols());
                    gemm(
                        g.rows(),
                        g.cols(),
                        bm.cols(),
                        1.0,
                        MatRef::new(g.data(), g.cols() as isize, 1),
                        MatRef::new(bm.data(), bm.cols() as isize, 1),
                        0.0,
                        d.data_mut(),
                        am.cols() as isize,
                        1,
                    );
                    acc(a, d);
                }
                if self.wants(b) {
                    // dB = Gᵀ · A
                    let mut d = Matrix::zeros(bm.rows(), bm.cols());
                    gemm(
                        g.cols(),
                        g.rows(),
                        am.cols(),
                        1.0,
                        MatRef::new(g.data(), g.cols() as isize, 1).t(),
                        MatRef::new(am.data(), am.cols() as isize, 1),
                        0.0,
                        d.data_mut(),
                        bm.cols() as isize,
                        1,
                    );
                    acc(b, d);
                }
            }
            &Op::Transpose(a) => acc(a, g.transpose()),
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                acc(a, g.zip_map(val(b), |g, b| g * b));
                acc(b, g.zip_map(val(a), |g, a| g * a));
            }
            &Op::Scale(a, c) => acc(a, g.map(|x| c * x)),
            &Op::AddScalar(a, _) => acc(a, g.clone()),
            &Op::MulScalar(a, s) => {
                let sv = val(s).item();
                acc(a, g.map(|x| sv * x));
                let ds: f64 = g.data().iter().zip(val(a).data()).map(|(g, a)| g * a).sum();
                acc(s, Matrix::scalar(ds));
            }
            &Op::Sigmoid(a) => acc(a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            &Op::Exp(a) => acc(a, g.zip_map(y, |g, y| g * y)),
            &Op::LnEps(a, eps) => acc(a, g.zip_map(val(a), |g, x| g / (x + eps))),
            &Op::Square(a) => acc(a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
            &Op::Recip(a) => acc(a, g.zip_map(y, |g, y| -g * y * y)),
            &Op::ClampMin(a, floor) => {
                acc(a, g.zip_map(val(a), |g, x| if x > floor { g } else { 0.0 }))
            }
            &Op::Sum(a) => {
                let am = val(a);
                acc(a, Matrix::filled(am.rows(), am.cols(), g.item()));
            }
            &Op::Mean(a) => {
                let am = val(a);
                let n = am.len() as f64;
                acc(a, Matrix::filled(am.rows(), am.cols(), g.item() / n));
            }
            &Op::ColMean(a) => {
                let am = val(a);
                let r = am.rows() as f64;
                acc(
                    a,
                    Matrix::from_fn(am.rows(), am.cols(), |_, j| g.get(0, j) / r),
                );
            }
            &Op::RowSum(a) => {
                let am = val(a);
                acc(a, Matrix::from_fn(am.rows(), am.cols(), |i, _| g.get(i, 0)));
            }
            &Op::OffDiagSum(a) => {
                let am = val(a);
                let gv = g.item();
                acc(
                    a,
                    Matrix::from_fn(am.rows(), am.cols(), |i, j| if i == j { 0.0 } else { gv }),
                );
            }
            &Op::RowNormalize(a) => {
                let Saved::Norms(norms) = &node.saved else {
                    unreachable!()
                };
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                acc(a, d);
            }
            &Op::MaskDiagonal(a) => {
                let mut d = g.clone();
                for i in 0..d.rows().min(d.cols()) {
                    d.set(i, i, 0.0);
                }
                acc(a, d);
            }
            &Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = yr[j] * (gr[j] - dot);
                    }
                }
                acc(a, d);
            }
            &Op::LayerNorm { x, gain, bias, .. } => {
                let Saved::LayerNorm { xhat, rstd } = &node.saved else {
                    unreachable!()
                };
                let gm = val(gain);
                let (rows, cols) = xhat.shape();
                if self.wants(gain) || self.wants(bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    acc(gain, dg);
                    acc(bias, db);
                }
                if self.wants(x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let xr = xhat.row(i);
                        let gr = g.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * gm.data()[j];
                            mean_d += dxh;
                            mean_dx += dxh * xr[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            let dxh = gr[j] * gm.data()[j];
                            *out = rstd[i] * (dxh - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(x, dx);
                }
            }
            &Op::Gelu(a) => acc(
                a,
                g.zip_map(val(a), |g, x| {
                    g * (std_normal_cdf(x) + x * std_normal_pdf(x))
                }),
            ),
            &Op::GravityLogits { sim, tau, eps } => acc(
                sim,
                g.zip_map(val(sim), |g, s| {
                    let d = 1.0 - s;
                    if d > eps {
                        g / (tau * d * d)
                    } else {
                        0.0
                    }
                }),
            ),
            Op::CrossEntropy { logits, targets } => {
                let Saved::Probs(p) = &node.saved else {
                    unreachable!()
                };
                let scale = g.item() / p.rows() as f64;
                let mut d = p.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let cell = &mut d.row_mut(i)[t];
                    *cell -= 1.0;
                }
                d.scale_assign(scale);
                acc(*logits, d);
            }
            Op::Embedding { table, ids } => {
                let tm = val(*table);
                let mut d = Matrix::zeros(tm.rows(), tm.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*table, d);
            }
            Op::Dropout { x, mask } => acc(*x, g.zip_map(mask, |g, m| g * m)),
            Op::CausalAttention {
                qkv,
                shape,
                dropout_mask,
            } => {
                let Saved::AttentionProbs(probs) = &node.saved else {
                    unreachable!()
                };
                let d = attention_backward(val(*qkv), g, *shape, probs, dropout_mask.as_deref());
                acc(*qkv, d);
            }
        }
        Ok(())
    }
}

fn eval<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Matrix) -> Result<(Matrix, Saved)> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        &Op::MatMul(a, b) => get(a).matmul(get(b))?,
        &Op::MatMulNt(a, b) => {
            let (am, bm) = (get(a), get(b));
            if am.cols() != bm.cols() {
                return Err(config_err!(
                    "matmul_nt shape mismatch: {:?} * {:?}ᵀ",
                    am.shape(),
                    bm.shape()
                ));
            }
            let mut out = Matrix::zeros(am.rows(), bm.rows());
            gemm(
                am.rows(),
                am.cols(),
                bm.rows(),
                1.0,
                MatRef::new(am.data(), am.cols() as isize, 1),
                MatRef::new(bm.data(), bm.cols() as isize, 1).t(),
                0.0,
                out.data_mut(),
                bm.rows() as isize,
                1,
            );
            out
        }
        &Op::Transpose(a) => get(a).transpose(),
        &Op::Add(a, b) => {
            same_shape("add", get(a), get(b))?;
            get(a).zip_map(get(b), |x, y| x + y)
        }
        &Op::Sub(a, b) => {
            same_shape("sub", get(a), get(b))?;
            get(a).zip_map(get(b), |x, y| x - y)
        }
        &Op::Mul(a, b) => {
            same_shape("mul", get(a), get(b))?;
            get(a).zip_map(get(b), |x, y| x * y)
        }
        &Op::Scale(a, c) => get(a).map(|x| c * x),
        &Op::AddScalar(a, c) => get(a).map(|x| x + c),
        &Op::MulScalar(a, s) => {
            let sm = get(s);
            if sm.shape() != (1, 1) {
                return Err(config_err!(
                    "mul_scalar needs a 1x1 factor, got {:?}",
                    sm.shape()
                ));
            }
            let sv = sm.item();
            get(a).map(|x| sv * x)
        }
        &Op::Sigmoid(a) => get(a).map(|x| 1.0 / (1.0 + (-x).exp())),
        &Op::Exp(a) => get(a).map(f64::exp),
        &Op::LnEps(a, eps) => get(a).map(|x| (x + eps).ln()),
        &Op::Square(a) => get(a).map(|x| x * x),
        &Op::Recip(a) => get(a).map(|x| 1.0 / x),
        &Op::ClampMin(a, floor) => get(a).map(|x| if x > floor { x } else { floor }),
        &Op::Sum(a) => Matrix::scalar(get(a).sum()),
        &Op::Mean(a) => {
            let m = get(a);
            if m.is_empty() {
                return Err(config_err!("mean of an empty matrix"));
            }
            Matrix::scalar(m.sum() / m.len() as f64)
        }
        &Op::ColMean(a) => {
            let m = get(a);
            if m.rows() == 0 {
                return Err(config_err!("col_mean of a matrix with no rows"));
            }
            let mut out = Matrix::zeros(1, m.cols());
            for row in m.row_iter() {
                for (o, &x) in out.data_mut().iter_mut().zip(row) {
                    *o += x;
                }
            }
            out.scale_assign(1.0 / m.rows() as f64);
            out
        }
        &Op::RowSum(a) => {
            let m = get(a);
            Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum())
        }
        &Op::OffDiagSum(a) => {
            let m = get(a);
            if m.rows() != m.cols() {
                return Err(config_err!("off_diag_sum needs a square matrix"));
            }
            let mut total = 0.0;
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    if i != j {
                        total += m.get(i, j);
                    }
                }
            }
            Matrix::scalar(total)
        }
        &Op::RowNormalize(a) => {
            let m = get(a);
            let mut out = m.clone();
            let mut norms = Vec::with_capacity(m.rows());
            for i in 0..m.rows() {
                let n = crate::numerics::matrix::l2_norm(m.row(i));
                if n == 0.0 {
                    return Err(domain_err!(
                        "row {i} has zero norm and cannot be normalized"
                    ));
                }
                for x in out.row_mut(i) {
                    *x /= n;
                }
                norms.push(n);
            }
            return Ok((out, Saved::Norms(norms)));
        }
        &Op::MaskDiagonal(a) => {
            let m = get(a);
            if m.rows() != m.cols() {
                return Err(config_err!("mask_diagonal needs a square matrix"));
            }
            let mut out = m.clone();
            for i in 0..m.rows() {
                out.set(i, i, f64::NEG_INFINITY);
            }
            out
        }
        &Op::SoftmaxRows(a) => {
            let m = get(a);
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                softmax_row_into(m.row(i), out.row_mut(i))?;
            }
            out
        }
        &Op::LayerNorm { x, gain, bias, eps } => {
            let (xm, gm, bm) = (get(x), get(gain), get(bias));
            let cols = xm.cols();
            if gm.shape() != (1, cols) || bm.shape() != (1, cols) {
                return Err(config_err!(
                    "layer_norm affine shape mismatch: x {:?}, gain {:?}, bias {:?}",
                    xm.shape(),
                    gm.shape(),
                    bm.shape()
                ));
            }
            let n = cols as f64;
            let mut xhat = Matrix::zeros(xm.rows(), cols);
            let mut out = Matrix::zeros(xm.rows(), cols);
            let mut rstd = Vec::with_capacity(xm.rows());
            for i in 0..xm.rows() {
                let row = xm.row(i);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for j in 0..cols {
                    let h = (row[j] - mean) * r;
                    xhat.set(i, j, h);
                    out.set(i, j, h * gm.data()[j] + bm.data()[j]);
                }
            }
            return Ok((out, Saved::LayerNorm { xhat, rstd }));
        }
        &Op::Gelu(a) => get(a).map(gelu_scalar),
        &Op::GravityLogits { sim, tau, eps } => get(sim).map(|s| 1.0 / (tau * (1.0 - s).max(eps))),
        Op::CrossEntropy { logits, targets } => {
            let m = get(*logits);
            if targets.len() != m.rows() {
                return Err(config_err!(
                    "cross_entropy: {} targets for {} rows",
                    targets.len(),
                    m.rows()
                ));
            }
            if m.rows() == 0 {
                return Err(config_err!("cross_entropy over zero rows"));
            }
            let mut probs = Matrix::zeros(m.rows(), m.cols());
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= m.cols() {
                    return Err(domain_err!(
                        "target {t} out of range for {} classes",
                        m.cols()
                    ));
                }
                let row = m.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[t];
                for (p, &x) in probs.row_mut(i).iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
            }
            return Ok((Matrix::scalar(total / m.rows() as f64), Saved::Probs(probs)));
        }
        Op::Embedding { table, ids } => {
            let t = get(*table);
            let mut out = Matrix::zeros(ids.len(), t.cols());
            for (r, &id) in ids.iter().enumerate() {
                if id >= t.rows() {
                    return Err(domain_err!("id {id} out of range for {} rows", t.rows()));
                }
                out.row_mut(r).copy_from_slice(t.row(id));
            }
            out
        }
        Op::Dropout { x, mask } => {
            same_shape("dropout", get(*x), mask)?;
            get(*x).zip_map(mask, |a, m| a * m)
        }
        Op::CausalAttention {
            qkv,
            shape,
            dropout_mask,
        } => {
            let (out, probs) = attention_forward(get(*qkv), *shape, dropout_mask.as_deref())?;
            return Ok((out, Saved::AttentionProbs(probs)));
        }
    };
    Ok((out, Saved::None))
}

fn attention_dims(qkv: &Matrix, shape: AttentionShape) -> Result<(usize, usize)> {
    let AttentionShape { batch, seq, heads } = shape;
    if qkv.rows() != batch * seq || qkv.cols() % 3 != 0 {
        return Err(config_err!(
            "attention input {:?} incompatible with batch {batch} x seq {seq}",
            qkv.shape()
        ));
    }
    let hidden = qkv.cols() / 3;
    if heads == 0 || hidden % heads != 0 {
        return Err(config_err!(
            "hidden {hidden} not divisible by {heads} heads"
        ));
    }
    Ok((hidden, hidden / heads))
}

fn attention_forward(
    qkv: &Matrix,
    shape: AttentionShape,
    dropout_mask: Option<&[f64]>,
) -> Result<(Matrix, Vec<f64>)> {
    let (hidden, dh) = attention_dims(qkv, shape)?;
    let AttentionShape { batch, seq, heads } = shape;
    let tt = seq * seq;
    if let Some(mask) = dropout_mask {
        if mask.len() != batch * heads * tt {
            return Err(config_err!("attention dropout mask has wrong length"));
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = qkv.cols() as isize;
    let mut probs = vec![0.0; batch * heads * tt];
    let mut out = Matrix::zeros(batch * seq, hidden);
    let mut weights = vec![0.0; tt];
    for b in 0..batch {
        let base = b * seq * qkv.cols();
        for h in 0..heads {
            let q = MatRef::new(&qkv.data()[base + h * dh..], stride, 1);
            let k = MatRef::new(&qkv.data()[base + hidden + h * dh..], stride, 1);
            let v = MatRef::new(&qkv.data()[base + 2 * hidden + h * dh..], stride, 1);
            let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            gemm(seq, dh, seq, scale, q, k.t(), 0.0, p, seq as isize, 1);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in &mut row[..=i] {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in &mut row[..=i] {
                    *x /= total;
                }
                for x in &mut row[i + 1..] {
                    *x = 0.0;
                }
            }
            let used: &[f64] = match dropout_mask {
                Some(mask) => {
                    let m = &mask[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                    for ((w, &pv), &mv) in weights.iter_mut().zip(p.iter()).zip(m) {
                        *w = pv * mv;
                    }
                    &weights
                }
                None => p,
            };
            let o = &mut out.data_mut()[b * seq * hidden + h * dh..];
            gemm(
                seq,
                seq,
                dh,
                1.0,
                MatRef::new(used, seq as isize, 1),
                v,
                0.0,
                o,
                hidden as isize,
                1,
            );
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    qkv: &Matrix,
    g: &Matrix,
    shape: AttentionShape,
    probs: &[f64],
    dropout_mask: Option<&[f64]>,
) -> Matrix {
    let AttentionShape { batch, seq, heads } = shape;
    let hidden = qkv.cols() / 3;
    let dh = hidden / heads;
    let tt = seq * seq;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = qkv.cols() as isize;
    let mut dqkv = Matrix::zeros(qkv.rows(), qkv.cols());
    let mut dweights = vec![0.0; tt];
    let mut weights = vec![0.0; tt];
    for b in 0..batch {
        let base = b * seq * qkv.cols();
        let gbase = b * seq * hidden;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            let mask = dropout_mask.map(|m| &m[(b * heads + h) * tt..(b * heads + h + 1) * tt]);
            let used: &[f64] = match mask {
                Some(m) => {
                    for ((w, &pv), &mv) in weights.iter_mut().zip(p).zip(m) {
                        *w = pv * mv;
                    }
                    &weights
                }
                None => p,
            };
            let go = MatRef::new(&g.data()[gbase + h * dh..], hidden as isize, 1);
            let q = MatRef::new(&qkv.data()[base + h * dh..], stride, 1);
            let k = MatRef::new(&qkv.data()[base + hidden + h * dh..], stride, 1);
            let v = MatRef::new(&qkv.data()[base + 2 * hidden + h * dh..], stride, 1);
            // dV = Wᵀ · dO
            gemm(
                seq,
                seq,
                dh,
                1.0,
                MatRef::new(used, seq as isize, 1).t(),
                go,
                0.0,
                &mut dqkv.data_mut()[base + 2 * hidden + h * dh..],
                stride,
                1,
            );
            // dW = dO · Vᵀ
            gemm(
                seq,
                dh,
                seq,
                1.0,
                go,
                v.t(),
                0.0,
                &mut dweights,
                seq as isize,
                1,
            );
            if let Some(m) = mask {
                for (d, &mv) in dweights.iter_mut().zip(m) {
                    *d *= mv;
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), zero above the diagonal.
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dweights[i * seq..(i + 1) * seq];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                for x in &mut dr[i + 1..] {
                    *x = 0.0;
                }
            }
            let ds = MatRef::new(&dweights, seq as isize, 1);
            // dQ = dS · K · scale
            gemm(
                seq,
                seq,
                dh,
                scale,
                ds,
                k,
                0.0,
                &mut dqkv.data_mut()[base + h * dh..],
                stride,
                1,
            );
            // dK = dSᵀ · Q · scale
            gemm(
                seq,
                seq,
                dh,
                scale,
                ds.t(),
                q,
                0.0,
                &mut dqkv.data_mut()[base + hidden + h * dh..],
                stride,
                1,
            );
        }
    }
    dqkv
}
