//! Forward definitions of the non-linear operations, without recording.

use super::{Matrix, TensorError, LAYER_NORM_EPS, MIN_ROW_NORM};

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large |x|.
#[inline]
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(m: &Matrix) -> Matrix {
    m.map(sigmoid_scalar)
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Softmax along each row, with max-subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// One softmax over all off-diagonal entries of a square matrix; the
/// diagonal of the result is zero and the off-diagonal entries sum to one.
pub fn offdiag_softmax(m: &Matrix) -> Result<Matrix, TensorError> {
    let n = m.rows();
    if n != m.cols() {
        return Err(TensorError::Shape { op: "offdiag_softmax", left: m.shape(), right: (n, n) });
    }
    if n < 2 {
        return Err(TensorError::Domain { op: "offdiag_softmax", msg: format!("needs at least 2 rows, got {n}") });
    }
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                max = max.max(m.get(i, j));
            }
        }
    }
    let mut out = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = (m.get(i, j) - max).exp();
                out.set(i, j, e);
                total += e;
            }
        }
    }
    Ok(out.scale(1.0 / total))
}

pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Scales every row to unit Euclidean norm. A row with norm below
/// [`MIN_ROW_NORM`] is an error.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix, TensorError> {
    let norms = row_norms(m);
    let mut out = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        if n < MIN_ROW_NORM {
            return Err(TensorError::DegenerateRow { row: i, norm: n });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

pub(crate) struct LayerNormParts {
    pub out: Matrix,
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(m: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<LayerNormParts, TensorError> {
    let c = m.cols();
    if gain.shape() != (1, c) {
        return Err(TensorError::Shape { op: "layer_norm", left: m.shape(), right: gain.shape() });
    }
    if bias.shape() != (1, c) {
        return Err(TensorError::Shape { op: "layer_norm", left: m.shape(), right: bias.shape() });
    }
    let mut xhat = m.clone();
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let out = Matrix::from_fn(m.rows(), c, |i, j| xhat.get(i, j) * gain.get(0, j) + bias.get(0, j));
    Ok(LayerNormParts { out, xhat, inv_std })
}

/// Per-row standardization (biased variance, epsilon [`LAYER_NORM_EPS`])
/// followed by the row-wise affine `gain * x + bias`.
pub fn layer_norm(m: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix, TensorError> {
    layer_norm_parts(m, gain, bias).map(|p| p.out)
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
    let Some(first) = parts.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let rows = first.rows();
    for p in parts {
        if p.rows() != rows {
            return Err(TensorError::Shape { op: "concat_cols", left: first.shape(), right: p.shape() });
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

/// Adds a `1 x cols` row to every row of `m`.
pub fn add_row(m: &Matrix, row: &Matrix) -> Result<Matrix, TensorError> {
    if row.shape() != (1, m.cols()) {
        return Err(TensorError::Shape { op: "add_row", left: m.shape(), right: row.shape() });
    }
    Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + row.get(0, j)))
}

/// Multiplies every row of `m` elementwise by a `1 x cols` row.
pub fn mul_row(m: &Matrix, row: &Matrix) -> Result<Matrix, TensorError> {
    if row.shape() != (1, m.cols()) {
        return Err(TensorError::Shape { op: "mul_row", left: m.shape(), right: row.shape() });
    }
    Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * row.get(0, j)))
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
