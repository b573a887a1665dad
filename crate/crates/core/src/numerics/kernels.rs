//! Forward kernels for the primitive operations.
//!
//! All row-wise operations (`softmax`, `log_softmax`, `rms_norm`) act on the last
//! axis. Matrix products treat their left operand as `rows × cols` regardless of
//! rank, so a 1-D vector multiplies as a single row.

use super::{NumericsError, Scalar, Tensor};

fn same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix<T: Scalar>(op: &'static str, b: &Tensor<T>) -> Result<(), NumericsError> {
    if b.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: vec![],
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn out_shape(a_shape: &[usize], n: usize) -> Vec<usize> {
    let mut s = a_shape[..a_shape.len() - 1].to_vec();
    s.push(n);
    s
}

/// `a · b` for `a: [.., k]`, `b: [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    require_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(out_shape(a.shape(), n), out)
}

/// Transpose of a 2-D tensor.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (m, n) = (a.rows(), a.cols());
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a · bᵀ` for `a: [.., k]`, `b: [n, k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    require_matrix("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let n = b.shape()[0];
    if k != b.shape()[1] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(a_row, &bd[j * k..(j + 1) * k]));
        }
    }
    Tensor::new(out_shape(a.shape(), n), out)
}

/// Dot product with four interleaved partial sums.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `aᵀ · b` for `a: [k, m]` and `b: [k, n]` (both read as row-major matrices).
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let mut out = vec![T::zero(); a.cols() * b.cols()];
    matmul_tn_into(a, b, &mut out)?;
    Tensor::new(vec![a.cols(), b.cols()], out)
}

/// Adds `aᵀ · b` into `out`, which holds an `[a.cols(), b.cols()]` matrix.
pub(crate) fn matmul_tn_into<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &mut [T],
) -> Result<(), NumericsError> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb || out.len() != m * n {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let b_row = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().fold(T::zero(), |acc, &v| acc + v))
}

/// Row lookup. A 1-D table yields one value per index (output shape = `ids_shape`);
/// a `[n, d]` table yields one row per index (output shape = `ids_shape ++ [d]`).
pub fn gather<T: Scalar>(
    table: &Tensor<T>,
    ids: &[usize],
    ids_shape: &[usize],
) -> Result<Tensor<T>, NumericsError> {
    let n = table.shape()[0];
    let width = table.len() / n;
    let mut data = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        if id >= n {
            return Err(NumericsError::IndexOutOfRange { index: id, bound: n });
        }
        data.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
    }
    let mut shape = ids_shape.to_vec();
    shape.extend_from_slice(&table.shape()[1..]);
    Tensor::new(shape, data)
}

/// Reciprocal root-mean-square of one row, `1 / sqrt(mean(x²) + eps)`.
pub(crate) fn inv_rms<T: Scalar>(row: &[T], eps: T) -> T {
    let d = T::lit(row.len() as f64);
    let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
    T::one() / (ms + eps).sqrt()
}

pub fn rms_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumericsError> {
    let d = x.cols();
    if gain.len() != d {
        return Err(NumericsError::ShapeMismatch {
            op: "rms_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let g = gain.data();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let inv = inv_rms(row, eps);
        out.extend(row.iter().zip(g).map(|(&v, &gv)| v * inv * gv));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    x.ensure_finite("softmax")?;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    x.ensure_finite("log_softmax")?;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + total.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}
