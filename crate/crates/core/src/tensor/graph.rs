use std::collections::HashMap;

use super::ops::{self, log_sigmoid_scalar, sigmoid_scalar};
use super::{Matrix, TensorError, MIN_ROW_NORM};
use crate::boxes::{giou_and_grad_cxcywh, BoxCxcywh};
use crate::params::{ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for [`Graph::custom`]: receives the input values, the
/// output value and the upstream gradient, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Matrix], &Matrix, &Matrix) -> Vec<Matrix>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    SoftmaxRows(Var),
    OffDiagSoftmax(Var),
    L2NormalizeRows(Var, Vec<f64>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    Kl { target: Matrix, a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
    Focal { logits: Var, targets: Matrix, gamma: f64, alpha: Option<f64> },
    GiouLoss { pred: Var, target: Matrix },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build one per forward pass, call
/// [`Graph::backward`] on a `1 x 1` node, then read gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when it does not influence the output
    /// or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a trainable leaf. Repeated binds of the
    /// same id return the same node, so shared weights accumulate gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` return `var`, so a
    /// parameter can be driven by an arbitrary node.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Parameters bound on this graph, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort();
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let value = ops::add_row(self.value(a), self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a ∘ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let value = ops::mul_row(self.value(a), self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = ops::sigmoid(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Single softmax over every off-diagonal entry; see [`ops::offdiag_softmax`].
    pub fn offdiag_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = ops::offdiag_softmax(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::OffDiagSoftmax(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let norms = ops::row_norms(self.value(a));
        if let Some(row) = norms.iter().position(|&n| n < MIN_ROW_NORM) {
            return Err(TensorError::DegenerateRow { row, norm: norms[row] });
        }
        let value = ops::l2_normalize_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2NormalizeRows(a, norms), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let parts = ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(parts.out, Op::LayerNorm { x, gain, bias, xhat: parts.xhat, inv_std: parts.inv_std }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let value = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Sum of every entry, as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along each row, giving a `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// `Σ target · (ln target − ln a)` over entries with positive target,
    /// treating `0 · ln 0` as zero.
    pub fn kl_divergence(&mut self, target: &Matrix, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        target.expect_same_shape("kl_divergence", av)?;
        let mut total = 0.0;
        for (idx, (&c, &p)) in target.data().iter().zip(av.data()).enumerate() {
            if c < 0.0 {
                return Err(TensorError::Domain { op: "kl_divergence", msg: format!("negative target at entry {idx}") });
            }
            if c > 0.0 {
                if p <= 0.0 {
                    return Err(TensorError::Domain {
                        op: "kl_divergence",
                        msg: format!("a = {p} at entry {idx} where target is {c}"),
                    });
                }
                total += c * (c.ln() - p.ln());
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Matrix::scalar(total), Op::Kl { target: target.clone(), a }, rg))
    }

    /// Weighted softmax cross-entropy over rows of `logits`; each row's
    /// contribution is scaled by `class_weights[target]` and the sum is
    /// divided by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || class_weights.len() != lv.cols() {
            return Err(TensorError::Shape { op: "cross_entropy", left: lv.shape(), right: (targets.len(), class_weights.len()) });
        }
        let probs = ops::softmax_rows(lv);
        let mut weights = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= lv.cols() {
                return Err(TensorError::Index { op: "cross_entropy", index: t, bound: lv.cols() });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = class_weights[t];
            total += w * (lse - row[t]);
            wsum += w;
            weights.push(w);
        }
        let value = if wsum > 0.0 { total / wsum } else { 0.0 };
        let norm = if wsum > 0.0 { 1.0 / wsum } else { 0.0 };
        for w in &mut weights {
            *w *= norm;
        }
        let rg = self.rg(logits);
        Ok(self.push(Matrix::scalar(value), Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs }, rg))
    }

    /// Sigmoid focal loss averaged over entries. `gamma = 0` with
    /// `alpha = None` is binary cross-entropy.
    pub fn focal_loss(&mut self, logits: Var, targets: &Matrix, gamma: f64, alpha: Option<f64>) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        targets.expect_same_shape("focal_loss", lv)?;
        let n = lv.len().max(1) as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| focal_entry(x, t, gamma, alpha).0)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Matrix::scalar(total / n), Op::Focal { logits, targets: targets.clone(), gamma, alpha }, rg))
    }

    /// Mean of `1 − GIoU` between center-form rows of `pred` and `target`.
    pub fn giou_loss(&mut self, pred: Var, target: &Matrix) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        target.expect_same_shape("giou_loss", pv)?;
        if pv.cols() != 4 {
            return Err(TensorError::Shape { op: "giou_loss", left: pv.shape(), right: (pv.rows(), 4) });
        }
        let mut total = 0.0;
        for i in 0..pv.rows() {
            let a = BoxCxcywh::from_slice(pv.row(i));
            let b = BoxCxcywh::from_slice(target.row(i));
            if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
                return Err(TensorError::Domain { op: "giou_loss", msg: format!("degenerate box in row {i}") });
            }
            total += 1.0 - giou_and_grad_cxcywh(&a, &b).0;
        }
        let n = pv.rows().max(1) as f64;
        let rg = self.rg(pred);
        Ok(self.push(Matrix::scalar(total / n), Op::GiouLoss { pred, target: target.clone() }, rg))
    }

    /// Records a user-defined operation with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(TensorError::Shape { op: "backward", left: out.shape(), right: (1, 1) });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of the bound parameters, zero-filled for parameters the
    /// output does not depend on.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Matrix)> {
        self.bound_params()
            .into_iter()
            .map(|(id, v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(v).shape();
                    Matrix::zeros(r, c)
                });
                (id, g)
            })
            .collect()
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Vec<(Var, Matrix)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()).expect("matmul grad shape");
                let gb = val(*a).transpose().matmul(g).expect("matmul grad shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Hadamard(a, b) => {
                let ga = g.hadamard(val(*b)).expect("same shape");
                let gb = g.hadamard(val(*a)).expect("same shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, column_sums(g))],
            Op::MulRow(a, r) => {
                let ga = ops::mul_row(g, val(*r)).expect("same shape");
                let gr = column_sums(&g.hadamard(val(*a)).expect("same shape"));
                vec![(*a, ga), (*r, gr)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)).expect("same shape"))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }).expect("same shape"))],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |gi, xi| 2.0 * xi * gi).expect("same shape"))],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |gi, xi| gi * sign(xi)).expect("same shape"))],
            Op::SoftmaxRows(a) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(*a, gx)]
            }
            Op::OffDiagSoftmax(a) => {
                let n = y.rows();
                let mut dot = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            dot += g.get(i, j) * y.get(i, j);
                        }
                    }
                }
                let gx = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { y.get(i, j) * (g.get(i, j) - dot) });
                vec![(*a, gx)]
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        gx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norms[i]);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gain_v = val(*gain);
                let c = xhat.cols() as f64;
                let mut gx = Matrix::zeros(xhat.rows(), xhat.cols());
                for i in 0..xhat.rows() {
                    let dxhat: Vec<f64> = (0..xhat.cols()).map(|j| g.get(i, j) * gain_v.get(0, j)).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c;
                    let mean_dx = dxhat.iter().zip(xhat.row(i)).map(|(d, x)| d * x).sum::<f64>() / c;
                    for j in 0..xhat.cols() {
                        gx.set(i, j, inv_std[i] * (dxhat[j] - mean_d - xhat.get(i, j) * mean_dx));
                    }
                }
                let ggain = column_sums(&g.hadamard(xhat).expect("same shape"));
                vec![(*x, gx), (*gain, ggain), (*bias, column_sums(g))]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    out.push((p, g.slice_cols(start, start + w).expect("concat grad slice")));
                    start += w;
                }
                out
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut gx = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                vec![(*a, gx)]
            }
            Op::SelectRows(a, indices) => {
                let av = val(*a);
                let mut gx = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
                vec![(*a, gx)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0)))]
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::Kl { target, a } => {
                let s = g.get(0, 0);
                let gx = target.zip_map(val(*a), |c, p| if c > 0.0 { -s * c / p } else { 0.0 }).expect("same shape");
                vec![(*a, gx)]
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let s = g.get(0, 0);
                let mut gx = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = gx.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * s;
                    }
                }
                vec![(*logits, gx)]
            }
            Op::Focal { logits, targets, gamma, alpha } => {
                let lv = val(*logits);
                let scale = g.get(0, 0) / lv.len().max(1) as f64;
                let gx = lv.zip_map(targets, |x, t| scale * focal_entry(x, t, *gamma, *alpha).1).expect("same shape");
                vec![(*logits, gx)]
            }
            Op::GiouLoss { pred, target } => {
                let pv = val(*pred);
                let scale = -g.get(0, 0) / pv.rows().max(1) as f64;
                let mut gx = Matrix::zeros(pv.rows(), 4);
                for i in 0..pv.rows() {
                    let (_, d) = giou_and_grad_cxcywh(&BoxCxcywh::from_slice(pv.row(i)), &BoxCxcywh::from_slice(target.row(i)));
                    for (k, dk) in d.iter().enumerate() {
                        gx.set(i, k, scale * dk);
                    }
                }
                vec![(*pred, gx)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(&values, y, g);
                assert_eq!(gs.len(), inputs.len(), "custom backward must return one gradient per input");
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for row in m.iter_rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Focal loss of one logit/target pair and its derivative w.r.t. the logit.
///
/// With `z = x` for a positive target and `z = −x` otherwise, `p_t = σ(z)`
/// and the loss is `α_t (1 − p_t)^γ (−ln p_t)`.
pub(crate) fn focal_entry(x: f64, t: f64, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    let positive = t > 0.5;
    let s = if positive { 1.0 } else { -1.0 };
    let z = s * x;
    let pt = sigmoid_scalar(z);
    let log_pt = log_sigmoid_scalar(z);
    let one_minus = sigmoid_scalar(-z);
    let at = match alpha {
        Some(a) if positive => a,
        Some(a) => 1.0 - a,
        None => 1.0,
    };
    let modulating = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
    let loss = -at * modulating * log_pt;
    let dz = at * (gamma * modulating * pt * log_pt - modulating * one_minus);
    (loss, s * dz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut g = Graph::new();
        let x = g.input(Matrix::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(2.0));
        let x = g.input(Matrix::scalar(5.0));
        let p = g.hadamard(c, x).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(1.5));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.hadamard(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg[0].1.get(0, 0), 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[[0.3, -1.2, 2.0], [0.5, 0.1, -0.7]]));
        let s = g.softmax_rows(x);
        let q = g.square(s);
        let l = g.sum_all(q);
        let first = g.backward(l).unwrap().get(x).unwrap().clone();
        let second = g.backward(l).unwrap().get(x).unwrap().clone();
        assert_eq!(first.data(), second.data());
    }

    #[test]
    fn kl_rejects_nonpositive_support() {
        let mut g = Graph::new();
        let a = g.input(Matrix::row_vector(&[0.0, 1.0]));
        let err = g.kl_divergence(&Matrix::row_vector(&[0.5, 0.5]), a).unwrap_err();
        assert!(matches!(err, TensorError::Domain { .. }));
    }

    #[test]
    fn focal_entry_derivative_matches_difference() {
        for &(x, t, gamma, alpha) in &[(0.3, 1.0, 2.0, Some(0.25)), (-1.7, 0.0, 2.0, Some(0.25)), (2.2, 0.0, 0.0, None), (0.0, 1.0, 1.5, None)] {
            let h = 1e-6;
            let num = (focal_entry(x + h, t, gamma, alpha).0 - focal_entry(x - h, t, gamma, alpha).0) / (2.0 * h);
            let ana = focal_entry(x, t, gamma, alpha).1;
            assert!((num - ana).abs() < 1e-8, "x={x} t={t}: {num} vs {ana}");
        }
    }
}
