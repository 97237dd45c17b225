//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes in execution order, so each node's operands always precede it
//! and the backward sweep visits each record exactly once. Tapes are rebuilt
//! every forward pass; leaf gradients accumulate across [`Tape::backward`]
//! calls until [`Tape::zero_grads`].

use crate::error::{Error, Result};
use crate::kernels;
use crate::numerics::tensor::Tensor;
use crate::numerics::EPS_LOG;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    SumAll(Var),
    CrossEntropy(Var, Vec<usize>),
    MaskedNll(Var, Vec<usize>, Vec<f64>),
    Mse(Var, Var),
    MaskedSqSum(Var, Var, Vec<f64>),
    GatherRows(Vec<Var>, Vec<usize>),
    /// Forward tanh with a deliberately wrong backward rule. Test fixture for
    /// the gradient checker's failure reporting.
    #[cfg(test)]
    CorruptTanh(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Populated for leaves only; persists across backward calls.
    leaf_grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
            requires_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a copy of `t` as a leaf. Gradients flow to the tape's leaf slot
    /// when `t.requires_grad()`; pull them out with [`Tape::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.push(1, 1, vec![value], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(n.rows, n.cols, n.data.clone()).expect("tape node is well formed")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).leaf_grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.leaf_grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {ar}x{ac} vs {br}x{bc}"
            )));
        }
        Ok((ar, ac))
    }

    fn binary_requires(&self, a: Var, b: Var) -> bool {
        self.node(a).requires_grad || self.node(b).requires_grad
    }

    // ── Arithmetic and structural ops ──────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {m}x{ka} . {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&mut out, &self.node(a).data, &self.node(b).data, m, ka, n);
        let rg = self.binary_requires(a, b);
        Ok(self.push(m, n, out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(m, n, data, Op::Add(a, b), rg))
    }

    /// `a[m x n] + bias[1 x n]`, the bias added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(Error::DimensionMismatch(format!(
                "row broadcast: {m}x{n} + {br}x{bc}"
            )));
        }
        let mut data = self.node(a).data.clone();
        let bv = &self.node(bias).data;
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let rg = self.binary_requires(a, bias);
        Ok(self.push(m, n, data, Op::AddRowBroadcast(a, bias), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(m, n, data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(m, n, data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * factor).collect();
        let rg = self.node(a).requires_grad;
        self.push(m, n, data, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.node(a).requires_grad;
        self.push(m, n, data, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.tanh()).collect();
        let rg = self.node(a).requires_grad;
        self.push(m, n, data, Op::Tanh(a), rg)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.tanh()).collect();
        let rg = self.node(a).requires_grad;
        self.push(m, n, data, Op::CorruptTanh(a), rg)
    }

    /// Left block first: `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.shape(a);
        let (mb, q) = self.shape(b);
        if m != mb {
            return Err(Error::DimensionMismatch(format!(
                "concat_cols: {m} rows vs {mb} rows"
            )));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&self.node(a).data[i * p..(i + 1) * p]);
            data.extend_from_slice(&self.node(b).data[i * q..(i + 1) * q]);
        }
        let rg = self.binary_requires(a, b);
        Ok(self.push(m, p + q, data, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(Error::SliceOutOfRange { start, end, cols: n });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.node(a).data[i * n + start..i * n + end]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(m, w, data, Op::SliceCols(a, start), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.node(a).data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(m, n, data, Op::SoftmaxRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.node(a).data.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(1, 1, vec![total], Op::SumAll(a), rg)
    }

    // ── Losses ─────────────────────────────────────────────────────────

    /// Mean over rows of `-ln(probs[i, labels[i]])`, log argument clamped to
    /// [`EPS_LOG`]. Rows of `probs` are expected to be distributions.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(probs);
        if labels.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "cross_entropy: {m} rows, {} labels",
                labels.len()
            )));
        }
        for &l in labels {
            if l >= n {
                return Err(Error::LabelOutOfRange { label: l, classes: n });
            }
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let p = self.node(probs).data[i * n + l].max(EPS_LOG);
            total -= p.ln();
        }
        total /= m as f64;
        let rg = self.node(probs).requires_grad;
        Ok(self.push(1, 1, vec![total], Op::CrossEntropy(probs, labels.to_vec()), rg))
    }

    /// Sum over rows of `mask[i] * -ln(probs[i, labels[i]])`. The caller is
    /// responsible for dividing by the number of unmasked rows.
    pub fn masked_nll(&mut self, probs: Var, labels: &[usize], mask: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(probs);
        if labels.len() != m || mask.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "masked_nll: {m} rows, {} labels, {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        for &l in labels {
            if l >= n {
                return Err(Error::LabelOutOfRange { label: l, classes: n });
            }
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if mask[i] == 0.0 {
                continue;
            }
            let p = self.node(probs).data[i * n + l].max(EPS_LOG);
            total -= mask[i] * p.ln();
        }
        let rg = self.node(probs).requires_grad;
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::MaskedNll(probs, labels.to_vec(), mask.to_vec()),
            rg,
        ))
    }

    /// Mean over all entries of the squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (m, n) = self.check_same_shape(pred, target, "mse")?;
        let mut total = 0.0;
        for (p, t) in self.node(pred).data.iter().zip(&self.node(target).data) {
            let d = p - t;
            total += d * d;
        }
        total /= (m * n) as f64;
        let rg = self.binary_requires(pred, target);
        Ok(self.push(1, 1, vec![total], Op::Mse(pred, target), rg))
    }

    /// Sum over rows of `mask[i] * ||pred[i,:] - target[i,:]||^2`. The caller
    /// normalizes by the number of supervised entries.
    pub fn masked_sq_sum(&mut self, pred: Var, target: Var, mask: &[f64]) -> Result<Var> {
        let (m, n) = self.check_same_shape(pred, target, "masked_sq_sum")?;
        if mask.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "masked_sq_sum: {m} rows, {} mask entries",
                mask.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..m {
            if mask[i] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..n {
                let d = self.node(pred).data[i * n + j] - self.node(target).data[i * n + j];
                row += d * d;
            }
            total += mask[i] * row;
        }
        let rg = self.binary_requires(pred, target);
        Ok(self.push(1, 1, vec![total], Op::MaskedSqSum(pred, target, mask.to_vec()), rg))
    }

    /// Picks one row per batch element from a list of equally shaped step
    /// tensors: `out[i, :] = steps[step_of_row[i]][i, :]`. Used to read the
    /// state at each row's last non-pad step.
    pub fn gather_rows(&mut self, steps: &[Var], step_of_row: &[usize]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (m, n) = self.shape(steps[0]);
        for &s in steps {
            let sh = self.shape(s);
            if sh != (m, n) {
                return Err(Error::DimensionMismatch(format!(
                    "gather_rows: step shape {}x{} vs {m}x{n}",
                    sh.0, sh.1
                )));
            }
        }
        if step_of_row.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "gather_rows: {m} rows, {} step indices",
                step_of_row.len()
            )));
        }
        let mut data = vec![0.0; m * n];
        for (i, &s) in step_of_row.iter().enumerate() {
            if s >= steps.len() {
                return Err(Error::DimensionMismatch(format!(
                    "gather_rows: step index {s} out of {} steps",
                    steps.len()
                )));
            }
            data[i * n..(i + 1) * n]
                .copy_from_slice(&self.node(steps[s]).data[i * n..(i + 1) * n]);
        }
        let rg = steps.iter().any(|&s| self.node(s).requires_grad);
        Ok(self.push(m, n, data, Op::GatherRows(steps.to_vec(), step_of_row.to_vec()), rg))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Derivatives with respect to every
    /// grad-requiring leaf are added into that leaf's persistent slot, so two
    /// backward calls on the same graph double the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::DetachedLoss);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    let slot = node
                        .leaf_grad
                        .get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (s, gv) in slot.iter_mut().zip(&g) {
                        *s += gv;
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = self.shape(b).1;
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt(&mut da, &g, &self.nodes[b.0].data, m, n, k);
                        acc(&mut adjoint, a.0, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn(&mut db, &self.nodes[a.0].data, &g, m, k, n);
                        acc(&mut adjoint, b.0, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(&mut adjoint, a.0, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(&mut adjoint, b.0, g);
                    }
                }
                Op::AddRowBroadcast(a, bias) => {
                    let n = self.shape(bias).1;
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        acc(&mut adjoint, bias.0, db);
                    }
                    if self.nodes[a.0].requires_grad {
                        acc(&mut adjoint, a.0, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(&mut adjoint, a.0, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(&mut adjoint, b.0, g.iter().map(|x| -x).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        acc(&mut adjoint, a.0, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        acc(&mut adjoint, b.0, db);
                    }
                }
                Op::Scale(a, factor) => {
                    acc(&mut adjoint, a.0, g.iter().map(|x| x * factor).collect());
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    acc(&mut adjoint, a.0, da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    acc(&mut adjoint, a.0, da);
                }
                #[cfg(test)]
                Op::CorruptTanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, t)| gv * 0.9 * (1.0 - t * t))
                        .collect();
                    acc(&mut adjoint, a.0, da);
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = self.shape(a);
                    let q = self.shape(b).1;
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * p];
                        for i2 in 0..m {
                            da[i2 * p..(i2 + 1) * p]
                                .copy_from_slice(&g[i2 * (p + q)..i2 * (p + q) + p]);
                        }
                        acc(&mut adjoint, a.0, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; m * q];
                        for i2 in 0..m {
                            db[i2 * q..(i2 + 1) * q]
                                .copy_from_slice(&g[i2 * (p + q) + p..(i2 + 1) * (p + q)]);
                        }
                        acc(&mut adjoint, b.0, db);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.shape(a);
                    let w = self.nodes[i].cols;
                    let mut da = vec![0.0; m * n];
                    for i2 in 0..m {
                        da[i2 * n + start..i2 * n + start + w]
                            .copy_from_slice(&g[i2 * w..(i2 + 1) * w]);
                    }
                    acc(&mut adjoint, a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.shape(a);
                    let s = &self.nodes[i].data;
                    let mut da = vec![0.0; m * n];
                    for i2 in 0..m {
                        let srow = &s[i2 * n..(i2 + 1) * n];
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..n {
                            da[i2 * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    acc(&mut adjoint, a.0, da);
                }
                Op::SumAll(a) => {
                    let len = self.nodes[a.0].data.len();
                    acc(&mut adjoint, a.0, vec![g[0]; len]);
                }
                Op::CrossEntropy(probs, labels) => {
                    let (m, n) = self.shape(probs);
                    let mut dp = vec![0.0; m * n];
                    for (i2, &l) in labels.iter().enumerate() {
                        let p = self.nodes[probs.0].data[i2 * n + l];
                        if p > EPS_LOG {
                            dp[i2 * n + l] = -g[0] / (m as f64 * p);
                        }
                    }
                    acc(&mut adjoint, probs.0, dp);
                }
                Op::MaskedNll(probs, labels, mask) => {
                    let n = self.shape(probs).1;
                    let mut dp = vec![0.0; self.nodes[probs.0].data.len()];
                    for (i2, &l) in labels.iter().enumerate() {
                        if mask[i2] == 0.0 {
                            continue;
                        }
                        let p = self.nodes[probs.0].data[i2 * n + l];
                        if p > EPS_LOG {
                            dp[i2 * n + l] = -g[0] * mask[i2] / p;
                        }
                    }
                    acc(&mut adjoint, probs.0, dp);
                }
                Op::Mse(pred, target) => {
                    let (m, n) = self.shape(pred);
                    let scale = 2.0 * g[0] / (m * n) as f64;
                    if self.nodes[pred.0].requires_grad {
                        let dp: Vec<f64> = self.nodes[pred.0]
                            .data
                            .iter()
                            .zip(&self.nodes[target.0].data)
                            .map(|(p, t)| scale * (p - t))
                            .collect();
                        acc(&mut adjoint, pred.0, dp);
                    }
                    if self.nodes[target.0].requires_grad {
                        let dt: Vec<f64> = self.nodes[pred.0]
                            .data
                            .iter()
                            .zip(&self.nodes[target.0].data)
                            .map(|(p, t)| -scale * (p - t))
                            .collect();
                        acc(&mut adjoint, target.0, dt);
                    }
                }
                Op::MaskedSqSum(pred, target, mask) => {
                    let (m, n) = self.shape(pred);
                    let build = |sign: f64, tape: &Tape| -> Vec<f64> {
                        let mut d = vec![0.0; m * n];
                        for i2 in 0..m {
                            if mask[i2] == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                let diff = tape.nodes[pred.0].data[i2 * n + j]
                                    - tape.nodes[target.0].data[i2 * n + j];
                                d[i2 * n + j] = sign * 2.0 * g[0] * mask[i2] * diff;
                            }
                        }
                        d
                    };
                    if self.nodes[pred.0].requires_grad {
                        let dp = build(1.0, self);
                        acc(&mut adjoint, pred.0, dp);
                    }
                    if self.nodes[target.0].requires_grad {
                        let dt = build(-1.0, self);
                        acc(&mut adjoint, target.0, dt);
                    }
                }
                Op::GatherRows(steps, step_of_row) => {
                    let n = self.nodes[i].cols;
                    let mut per_step: Vec<Option<Vec<f64>>> = vec![None; steps.len()];
                    for (row, &s) in step_of_row.iter().enumerate() {
                        if !self.nodes[steps[s].0].requires_grad {
                            continue;
                        }
                        let buf = per_step[s]
                            .get_or_insert_with(|| vec![0.0; self.nodes[steps[s].0].data.len()]);
                        buf[row * n..(row + 1) * n].copy_from_slice(&g[row * n..(row + 1) * n]);
                    }
                    for (s, buf) in per_step.into_iter().enumerate() {
                        if let Some(buf) = buf {
                            acc(&mut adjoint, steps[s].0, buf);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(adjoint: &mut [Option<Vec<f64>>], idx: usize, delta: Vec<f64>) {
    match &mut adjoint[idx] {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(&delta) {
                *b += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(rows, cols, data).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity_and_direct() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(2, 2, vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let m = tape.constant(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = tape.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);

        let z = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        let zz = tape.matmul(z, m).unwrap();
        assert_eq!(tape.value(zz), &[0.0; 4]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(1, 1, vec![0.0]).unwrap();
        let s = tape.sigmoid(z);
        assert_eq!(tape.value_scalar(s), 0.5);
        let t = tape.tanh(z);
        assert_eq!(tape.value_scalar(t), 0.0);

        let a = tape.constant(2, 1, vec![1.0, 2.0]).unwrap();
        let b = tape.constant(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.shape(cat), (2, 3));
        assert_eq!(tape.value(cat), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);

        assert!(matches!(
            tape.slice_cols(cat, 2, 4),
            Err(Error::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_symmetry_and_derived_value() {
        let mut tape = Tape::new();
        let x = tape
            .constant(2, 2, vec![0.0, 0.0, 2.0_f64.ln(), 0.0])
            .unwrap();
        let s = tape.softmax_rows(x);
        let v = tape.value(s);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);

        let c = tape.constant(1, 4, vec![7.0; 4]).unwrap();
        let sc = tape.softmax_rows(c);
        for v in tape.value(sc) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let l = tape.cross_entropy(p, &[0]).unwrap();
        assert!(tape.value_scalar(l).abs() < 1e-12);

        let p2 = tape.constant(1, 2, vec![0.5, 0.5]).unwrap();
        let l2 = tape.cross_entropy(p2, &[1]).unwrap();
        assert!((tape.value_scalar(l2) - 2.0_f64.ln()).abs() < 1e-12);

        let p3 = tape
            .constant(2, 2, vec![1.0, 0.0, 0.5, 0.5])
            .unwrap();
        let l3 = tape.cross_entropy(p3, &[0, 1]).unwrap();
        assert!((tape.value_scalar(l3) - 2.0_f64.ln() / 2.0).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(p3, &[0, 2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let b = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value_scalar(l), 1.0);

        let c = tape.constant(1, 2, vec![2.0, 0.0]).unwrap();
        let l2 = tape.mse(c, b).unwrap();
        assert_eq!(tape.value_scalar(l2), 2.0);

        let l3 = tape.mse(a, a).unwrap();
        assert_eq!(tape.value_scalar(l3), 0.0);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let t = grad_tensor(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn backward_mse_at_minimum_is_zero() {
        let t = grad_tensor(2, 2, vec![0.3, -0.7, 0.1, 0.9]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let c = tape
            .constant(2, 2, vec![0.3, -0.7, 0.1, 0.9])
            .unwrap();
        let l = tape.mse(x, c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let t = grad_tensor(1, 2, vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        assert!(matches!(
            tape.backward(x),
            Err(Error::NotScalar { rows: 1, cols: 2 })
        ));
        assert!(matches!(tape.backward(Var(99)), Err(Error::DetachedLoss)));
    }

    #[test]
    fn gather_rows_picks_last_valid_step() {
        let mut tape = Tape::new();
        let s0 = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s1 = tape.constant(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.gather_rows(&[s0, s1], &[1, 0]).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 3.0, 4.0]);
    }
}
