//! Dense row-major `f64` tensors and the forward kernels built on them.
//!
//! Shapes here are tiny (feature dim ≤ 512, frame count ≤ 32), so storage is
//! a flat `Vec<f64>` with no views or strides. Kernels that operate "per row"
//! treat a rank-1 tensor as a single row and preserve the input rank.

use crate::{Error, Result};

/// Variance floor inside row normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Norm threshold below which a vector is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expect} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Interpret as (rows, cols): rank-1 is a single row, rank-2 as-is.
    pub fn as_rows(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> Result<&[f64]> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return Err(Error::shape(format!("row {r} out of {rows}")));
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("{what} contains non-finite entries")))
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    Ok(map2(a, b, |x, y| x + y))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "sub")?;
    Ok(map2(a, b, |x, y| x - y))
}

pub fn mul_elem(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "mul_elem")?;
    Ok(map2(a, b, |x, y| x * y))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| c * x).collect(),
    }
}

/// Add a rank-1 row vector to every row.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.as_rows()?;
    if row.shape() != [cols] {
        return Err(Error::shape(format!(
            "add_row: row shape {:?} does not match {cols} columns",
            row.shape()
        )));
    }
    let mut out = a.clone();
    for r in 0..rows {
        for c in 0..cols {
            out.data[r * cols + c] += row.data[c];
        }
    }
    Ok(out)
}

/// Multiply every row elementwise by a rank-1 row vector.
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.as_rows()?;
    if row.shape() != [cols] {
        return Err(Error::shape(format!(
            "mul_row: row shape {:?} does not match {cols} columns",
            row.shape()
        )));
    }
    let mut out = a.clone();
    for r in 0..rows {
        for c in 0..cols {
            out.data[r * cols + c] *= row.data[c];
        }
    }
    Ok(out)
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_rows()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::shape(format!(
            "matmul: inner dims {k} vs {kb} (shapes {:?} · {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                data[i * n + j] += av * b.data[l * n + j];
            }
        }
    }
    let shape = if a.rank() == 1 { vec![n] } else { vec![m, n] };
    Ok(Tensor { shape, data })
}

/// `a (m×k) · b (n×k)ᵀ`. A rank-1 `a` yields a rank-1 result of length n.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_rows()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::shape(format!(
            "matmul_nt: inner dims {k} vs {kb} (shapes {:?} · {:?}ᵀ)",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.data[i * k + l] * b.data[j * k + l];
            }
            data[i * n + j] = acc;
        }
    }
    let shape = if a.rank() == 1 { vec![n] } else { vec![m, n] };
    Ok(Tensor { shape, data })
}

/// `aᵀ (k×m) · b (m×n)`; rank-1 inputs are treated as single rows, so two
/// rank-1 inputs give their outer product. Output is always rank-2.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_rows()?;
    let (mb, n) = b.as_rows()?;
    if m != mb {
        return Err(Error::shape(format!(
            "matmul_tn: outer dims {m} vs {mb} (shapes {:?}ᵀ · {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = vec![0.0; k * n];
    for l in 0..m {
        for i in 0..k {
            let av = a.data[l * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                data[i * n + j] += av * b.data[l * n + j];
            }
        }
    }
    Tensor::matrix(k, n, data)
}

/// Row-wise softmax with max-subtraction for stability.
///
/// Each output row is nonnegative and sums to 1 within 1e-12.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.ensure_finite("softmax input")?;
    let (rows, cols) = logits.as_rows()?;
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax (max-subtracted).
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.ensure_finite("log_softmax input")?;
    let (rows, cols) = logits.as_rows()?;
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= log_sum;
        }
    }
    Ok(out)
}

/// Row-wise standardization: per row subtract the mean and divide by
/// `sqrt(var + eps)`. No affine part; compose with `mul_row`/`add_row`.
pub fn layer_norm_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.as_rows()?;
    let mut out = a.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Arithmetic mean over the row dimension: R×C → C.
pub fn mean_pool_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.dims2()?;
    let mut data = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c] += a.data[r * cols + c];
        }
    }
    for v in data.iter_mut() {
        *v /= rows as f64;
    }
    Ok(Tensor::vector(data))
}

/// Normalize each row to unit L2 norm. Errors on near-zero rows.
pub fn l2_normalize_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.as_rows()?;
    let mut out = a.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= DEGENERATE_NORM {
            return Err(Error::degenerate(format!(
                "cannot normalize row {r} with norm {norm:e}"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Smooth (tanh-form) GELU nonlinearity, elementwise.
pub fn gelu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| gelu_scalar(x)).collect(),
    }
}

/// Columns `[start, start+width)` of a rank-2 tensor.
pub fn slice_cols(a: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (rows, cols) = a.dims2()?;
    if start + width > cols || width == 0 {
        return Err(Error::shape(format!(
            "slice_cols [{start}, {}) out of {cols} columns",
            start + width
        )));
    }
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend_from_slice(&a.data[r * cols + start..r * cols + start + width]);
    }
    Tensor::matrix(rows, width, data)
}

/// Rows `[start, start+count)` of a rank-2 tensor.
pub fn slice_rows(a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let (rows, cols) = a.dims2()?;
    if start + count > rows || count == 0 {
        return Err(Error::shape(format!(
            "slice_rows [{start}, {}) out of {rows} rows",
            start + count
        )));
    }
    Tensor::matrix(
        count,
        cols,
        a.data[start * cols..(start + count) * cols].to_vec(),
    )
}

/// Concatenate rank-2 tensors with equal row counts along columns.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols of zero tensors".to_string()));
    }
    let (rows, _) = parts[0].dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(Error::shape(format!(
                "concat_cols: row counts {rows} vs {r} differ"
            )));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    Tensor::matrix(rows, total, data)
}

/// Dot product of two rank-1 tensors, as a scalar tensor.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(Error::shape(format!(
            "dot expects rank-1 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.same_shape(b, "dot")?;
    let v = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    Ok(Tensor::scalar(v))
}

/// Mean over all entries, as a scalar tensor.
pub fn mean_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
}

/// Entry `index` of a rank-1 tensor, as a scalar tensor.
pub fn pick(a: &Tensor, index: usize) -> Result<Tensor> {
    if a.rank() != 1 {
        return Err(Error::shape(format!(
            "pick expects a rank-1 tensor, got {:?}",
            a.shape()
        )));
    }
    if index >= a.len() {
        return Err(Error::parameter(format!(
            "pick index {index} out of {}",
            a.len()
        )));
    }
    Ok(Tensor::scalar(a.data[index]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_uniform_logits() {
        let t = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let s = softmax_rows(&t).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        // exp-normalize of [ln 2, 0] is [2/3, 1/3]
        let t = Tensor::vector(vec![2.0_f64.ln(), 0.0]);
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::vector(vec![1000.0, 0.0]);
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let t = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 5.0, 5.5, 4.7]).unwrap();
        let s = softmax_rows(&t).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).unwrap().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = add_row(&t, &Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let mut shifted = shifted;
        for v in shifted.data_mut().iter_mut() {
            *v += 7.25;
        }
        let s2 = softmax_rows(&shifted).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::vector(vec![f64::NAN, 0.0]);
        assert!(matches!(softmax_rows(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_transposed_matmul() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let c = matmul_nt(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4.0, 3.0, 10.0, 7.5]);
    }

    #[test]
    fn mean_pool_two_rows() {
        let a = Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let m = mean_pool_rows(&a).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_rows_standardizes() {
        let a = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = layer_norm_rows(&a).unwrap();
        let mean: f64 = n.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn slice_and_concat_cols_roundtrip() {
        let a = Tensor::matrix(2, 4, (0..8).map(|v| v as f64).collect()).unwrap();
        let left = slice_cols(&a, 0, 2).unwrap();
        let right = slice_cols(&a, 2, 2).unwrap();
        let back = concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert!(matches!(l2_normalize_rows(&z), Err(Error::Degenerate(_))));
    }
}
