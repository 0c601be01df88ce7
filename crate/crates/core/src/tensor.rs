//! Dense row-major tensors and the small set of linear algebra routines the
//! rest of the crate is built on.
//!
//! Everything is `f64`; losses in the hundreds get subtracted from each other
//! in the KL estimators, so single precision would lose too many digits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree and every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument {
                context: format!("shape {shape:?} expects {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor constructor".into(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument {
                context: "from_rows: ragged rows".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidArgument {
                context: format!("{op}: expected 2-D tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Matrix product of two 2-D tensors.
    pub fn mat_mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("mat_mul")?;
        let (k2, n) = rhs.dims2("mat_mul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "mat_mul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both rhs and out.
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * rrow[j];
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    /// Element-wise product.
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Solves `L x = b` for lower-triangular `L` by forward substitution.
pub fn tril_solve(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let (n, c) = l.dims2("tril_solve")?;
    if n != c || b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "tril_solve",
            left: l.shape().to_vec(),
            right: vec![b.len()],
        });
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        let diag = l.get2(i, i);
        if diag == 0.0 {
            return Err(Error::Singular {
                op: "tril_solve",
                detail: format!("zero diagonal at {i}"),
            });
        }
        let mut acc = b[i];
        for j in 0..i {
            acc -= l.get2(i, j) * x[j];
        }
        x[i] = acc / diag;
    }
    Ok(x)
}

/// Solves `L^T x = b` for lower-triangular `L` by backward substitution,
/// without materializing the transpose.
pub fn tril_transpose_solve(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let (n, c) = l.dims2("tril_transpose_solve")?;
    if n != c || b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "tril_transpose_solve",
            left: l.shape().to_vec(),
            right: vec![b.len()],
        });
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let diag = l.get2(i, i);
        if diag == 0.0 {
            return Err(Error::Singular {
                op: "tril_transpose_solve",
                detail: format!("zero diagonal at {i}"),
            });
        }
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= l.get2(j, i) * x[j];
        }
        x[i] = acc / diag;
    }
    Ok(x)
}

/// Inverse of `Sigma = L L^T` given its Cholesky factor `L`, column by column
/// through two triangular solves. The result is symmetrized to remove
/// round-off asymmetry.
pub fn spd_inverse(l: &Tensor) -> Result<Tensor> {
    let (n, c) = l.dims2("spd_inverse")?;
    if n != c {
        return Err(Error::InvalidArgument {
            context: format!("spd_inverse: non-square shape {:?}", l.shape()),
        });
    }
    for i in 0..n {
        if l.get2(i, i) <= 0.0 {
            return Err(Error::Singular {
                op: "spd_inverse",
                detail: format!("non-positive diagonal at {i}"),
            });
        }
    }
    let mut inv = Tensor::zeros(vec![n, n]);
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let y = tril_solve(l, &e)?;
        let x = tril_transpose_solve(l, &y)?;
        e[col] = 0.0;
        for r in 0..n {
            inv.set2(r, col, x[r]);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv.get2(i, j) + inv.get2(j, i));
            inv.set2(i, j, s);
            inv.set2(j, i, s);
        }
    }
    Ok(inv)
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims2("cholesky")?;
    if n != c {
        return Err(Error::InvalidArgument {
            context: format!("cholesky: non-square shape {:?}", a.shape()),
        });
    }
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get2(i, j);
            for k in 0..j {
                acc -= l.get2(i, k) * l.get2(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Singular {
                        op: "cholesky",
                        detail: format!("non-positive pivot {acc:e} at {i}"),
                    });
                }
                l.set2(i, i, acc.sqrt());
            } else {
                l.set2(i, j, acc / l.get2(j, j));
            }
        }
    }
    Ok(l)
}

/// `log det(L L^T) = 2 * sum(log diag(L))`.
pub fn log_det_from_chol(l: &Tensor) -> f64 {
    let n = l.rows();
    (0..n).map(|i| l.get2(i, i).ln()).sum::<f64>() * 2.0
}
