//! Dense row-major matrices and the handful of probability helpers the rest
//! of the crate is built on.
//!
//! Everything is `f64`. The Hessian path needs it, and at this model size the
//! forward pass does not suffer much from it either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| self.get(rows[r], cols[c]))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        (0..self.rows).all(|r| {
            (r + 1..self.cols).all(|c| (self.get(r, c) - self.get(c, r)).abs() <= tol * scale)
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on raw row-major buffers, where
/// `op` optionally transposes. Shapes are those of `op(a)` (m×k) and `op(b)` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(
        a.rows, a.cols, b.cols, 1.0, &a.data, false, &b.data, false, 0.0, &mut c.data,
    );
    Ok(c)
}

/// `a · bᵀ`, the shape of every linear layer applied to row activations.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(
        a.rows, a.cols, b.rows, 1.0, &a.data, false, &b.data, true, 0.0, &mut c.data,
    );
    Ok(c)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(
        a.cols, a.rows, b.cols, 1.0, &a.data, true, &b.data, false, 0.0, &mut c.data,
    );
    Ok(c)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!("cholesky of {}x{}", a.rows, a.cols)));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {j} is {d:e}"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor. The result is symmetrized.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows;
    // L⁻¹ by forward substitution, column by column.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        for r in c..n {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                s -= l.get(r, k) * linv.get(k, c);
            }
            linv.set(r, c, s / l.get(r, r));
        }
    }
    // A⁻¹ = L⁻ᵀ · L⁻¹
    let mut inv = matmul_tn(&linv, &linv)?;
    for r in 0..n {
        for c in r + 1..n {
            let v = 0.5 * (inv.get(r, c) + inv.get(c, r));
            inv.set(r, c, v);
            inv.set(c, r, v);
        }
    }
    if !inv.is_finite() {
        return Err(Error::NotPositiveDefinite("inverse is not finite".into()));
    }
    Ok(inv)
}

/// Adds `damp · mean(diag(h))` to the diagonal.
pub fn dampen(h: &Matrix, damp: f64) -> Result<Matrix> {
    if h.rows != h.cols {
        return Err(Error::Shape(format!("hessian is {}x{}", h.rows, h.cols)));
    }
    if !(damp >= 0.0) {
        return Err(Error::Config(format!("damping must be non-negative, got {damp}")));
    }
    let n = h.rows;
    let mean = if n == 0 {
        0.0
    } else {
        h.diag().iter().sum::<f64>() / n as f64
    };
    let mut out = h.clone();
    for i in 0..n {
        out.data[i * n + i] += damp * mean;
    }
    Ok(out)
}

/// `(h + damp·mean(diag(h))·I)⁻¹` for a symmetric PSD `h`.
pub fn psd_inverse(h: &Matrix, damp: f64) -> Result<Matrix> {
    if h.rows != h.cols {
        return Err(Error::Shape(format!("hessian is {}x{}", h.rows, h.cols)));
    }
    if !h.is_symmetric(1e-8) {
        return Err(Error::Shape("hessian is not symmetric".into()));
    }
    spd_inverse(&dampen(h, damp)?)
}

/// Numerically stable log-softmax of one row, written into `out`.
pub fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let (src, dst) = (logits.row(r), &mut out.data[r * logits.cols..(r + 1) * logits.cols]);
        log_softmax_into(src, dst);
    }
    out
}

/// `KL(softmax(p) ‖ softmax(q))` for one row of log-probabilities.
#[inline]
pub(crate) fn kl_row_from_logprobs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum::<f64>()
        .max(0.0)
}

/// Mean over rows of `KL(softmax(p_row) ‖ softmax(q_row))`.
pub fn kl_divergence(p_logits: &Matrix, q_logits: &Matrix) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Shape(format!(
            "kl between {}x{} and {}x{}",
            p_logits.rows, p_logits.cols, q_logits.rows, q_logits.cols
        )));
    }
    if p_logits.rows == 0 {
        return Ok(0.0);
    }
    let cols = p_logits.cols;
    let mut lp = vec![0.0; cols];
    let mut lq = vec![0.0; cols];
    let mut total = 0.0;
    for r in 0..p_logits.rows {
        log_softmax_into(p_logits.row(r), &mut lp);
        log_softmax_into(q_logits.row(r), &mut lq);
        total += kl_row_from_logprobs(&lp, &lq);
    }
    Ok(total / p_logits.rows as f64)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Index(format!(
                "target {t} at position {r} exceeds vocabulary {}",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}
