use std::fmt;
use std::io::{BufRead, Write};

use super::TensorError;

/// Dense row-major matrix of `f64`.
///
/// Values are immutable once produced by an operation; every method that
/// "modifies" a matrix returns a new one.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::DataLength { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input, which is a
    /// programming error rather than a data error.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, TensorError> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Matrix) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: n, cols: m, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.zip_map(other, |a, b| a + b).map_err(|e| e.rename("add"))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.zip_map(other, |a, b| a - b).map_err(|e| e.rename("sub"))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.zip_map(other, |a, b| a * b).map_err(|e| e.rename("hadamard"))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix, TensorError> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(TensorError::Index { op: "select_rows", index: i, bound: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix, TensorError> {
        if start > end || end > self.cols {
            return Err(TensorError::Index { op: "slice_cols", index: end, bound: self.cols });
        }
        Ok(Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j)))
    }

    /// Writes the plain-text form: a `rows cols` header, then one line per
    /// row of space-separated values with 17 significant digits.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for row in self.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("matrix text is ascii")
    }

    /// Reads one matrix in the plain-text form from a line iterator. Blank
    /// lines before the header are skipped. `line_no` tracks the 1-based
    /// position for diagnostics and is advanced past the consumed lines.
    pub fn read_text<B: BufRead>(lines: &mut std::io::Lines<B>, line_no: &mut usize) -> Result<Matrix, TensorError> {
        let header = loop {
            *line_no += 1;
            match lines.next() {
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => break l,
                Some(Err(e)) => return Err(TensorError::Parse { line: *line_no, msg: e.to_string() }),
                None => return Err(TensorError::Parse { line: *line_no, msg: "missing matrix header".into() }),
            }
        };
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| TensorError::Parse { line: *line_no, msg: format!("bad header {header:?}: {e}") })?;
        let [rows, cols] = dims[..] else {
            return Err(TensorError::Parse { line: *line_no, msg: format!("header must be `rows cols`, got {header:?}") });
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            *line_no += 1;
            let line = match lines.next() {
                Some(Ok(l)) => l,
                Some(Err(e)) => return Err(TensorError::Parse { line: *line_no, msg: e.to_string() }),
                None => return Err(TensorError::Parse { line: *line_no, msg: "unexpected end of matrix".into() }),
            };
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| TensorError::Parse { line: *line_no, msg: format!("bad number {tok:?}: {e}") })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(TensorError::Parse {
                    line: *line_no,
                    msg: format!("expected {cols} values, found {}", data.len() - before),
                });
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_text(text: &str) -> Result<Matrix, TensorError> {
        let mut lines = std::io::Cursor::new(text).lines();
        let mut line_no = 0;
        Matrix::read_text(&mut lines, &mut line_no)
    }
}

/// Writes `[name]` sections, each followed by a matrix in text form.
pub fn write_named<'a, W: Write>(mut w: W, items: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> std::io::Result<()> {
    for (name, m) in items {
        writeln!(w, "[{name}]")?;
        m.write_text(&mut w)?;
    }
    Ok(())
}

/// Reads the sections written by [`write_named`], in file order.
pub fn read_named<R: BufRead>(reader: R) -> Result<Vec<(String, Matrix)>, TensorError> {
    let mut lines = reader.lines();
    let mut line_no = 0;
    let mut out = Vec::new();
    loop {
        line_no += 1;
        let line = match lines.next() {
            None => break,
            Some(Err(e)) => return Err(TensorError::Parse { line: line_no, msg: e.to_string() }),
            Some(Ok(l)) => l,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
            return Err(TensorError::Parse { line: line_no, msg: format!("expected [name], got {trimmed:?}") });
        };
        let m = Matrix::read_text(&mut lines, &mut line_no)?;
        out.push((name.to_string(), m));
    }
    Ok(out)
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.iter_rows() {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}
