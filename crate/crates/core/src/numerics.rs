//! Dense row-major matrices and the factorisations every GP computation
//! leans on: jittered Cholesky, triangular solves and log-determinants.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalIntegrity(format!(
                "non-finite matrix entry {bad}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor: shape is trusted, finiteness is not checked.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::dims(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `eps` to the diagonal in place.
    pub fn add_diagonal(&mut self, eps: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += eps;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Symmetry check relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, true)
    }
}

/// General matrix product `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &DenseMatrix, ta: bool, b: &DenseMatrix, tb: bool) -> Result<DenseMatrix> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        return Err(Error::dims(format!(
            "matmul inner dims {k} vs {k2} ({:?}{} x {:?}{})",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        )));
    }
    let mut out = DenseMatrix::zeros(m, n);
    gemm_into(a, ta, b, tb, 0.0, &mut out);
    Ok(out)
}

/// `out = beta·out + op(a)·op(b)`; shapes must already agree.
pub(crate) fn gemm_into(
    a: &DenseMatrix,
    ta: bool,
    b: &DenseMatrix,
    tb: bool,
    beta: f64,
    out: &mut DenseMatrix,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the owned row-major buffers exactly and `out`
    // is a distinct allocation of shape m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower-triangular square matrix with strictly positive diagonal, stored
/// in full row-major form.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    inner: DenseMatrix,
}

impl LowerTriangular {
    /// Validates the triangular structure and the positive diagonal.
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims("lower-triangular factor must be square"));
        }
        for i in 0..m.rows() {
            if !(m.get(i, i) > 0.0) {
                return Err(Error::NumericalIntegrity(format!(
                    "diagonal entry {i} is {} (must be > 0)",
                    m.get(i, i)
                )));
            }
            if (i + 1..m.cols()).any(|j| m.get(i, j) != 0.0) {
                return Err(Error::NumericalIntegrity(
                    "non-zero entry above the diagonal".into(),
                ));
            }
        }
        Ok(Self { inner: m })
    }

    pub(crate) fn from_dense_unchecked(m: DenseMatrix) -> Self {
        Self { inner: m }
    }

    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.inner
    }

    pub fn into_dense(self) -> DenseMatrix {
        self.inner
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        gemm(&self.inner, false, &self.inner, true).expect("square factor")
    }
}

/// Jitter rungs tried in order when a Cholesky factorisation fails.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct JitterLadder(pub Vec<f64>);

impl Default for JitterLadder {
    fn default() -> Self {
        Self(vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4])
    }
}

impl JitterLadder {
    /// Rungs with `0` forced to the front and duplicates removed.
    fn rungs(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for &r in &self.0 {
            if r > 0.0 && r.is_finite() && !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }
}

/// Cholesky factor together with the jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct Cholesky {
    pub lower: LowerTriangular,
    pub jitter: f64,
}

/// Factorises `m + εI` for the smallest rung `ε` that yields a positive
/// definite matrix.
pub fn cholesky_jitter(m: &DenseMatrix, ladder: &JitterLadder) -> Result<Cholesky> {
    if !m.is_square() {
        return Err(Error::dims(format!(
            "cholesky needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    if !m.is_symmetric(1e-10) {
        return Err(Error::NumericalIntegrity(
            "cholesky input is not symmetric".into(),
        ));
    }
    let rungs = ladder.rungs();
    for &eps in &rungs {
        if let Some(l) = cholesky_raw(m, eps) {
            return Ok(Cholesky {
                lower: LowerTriangular::from_dense_unchecked(l),
                jitter: eps,
            });
        }
    }
    Err(Error::FactorizationFailure {
        max_jitter: *rungs.last().unwrap_or(&0.0),
    })
}

/// Plain Cholesky–Banachiewicz of `m + eps·I` reading the lower triangle.
pub(crate) fn cholesky_raw(m: &DenseMatrix, eps: f64) -> Option<DenseMatrix> {
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let li = &l.data[i * n..i * n + j];
            let lj = &l.data[j * n..j * n + j];
            let dot: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
            let mut s = m.get(i, j) - dot;
            if i == j {
                s += eps;
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.data[i * n + i] = s.sqrt();
            } else {
                l.data[i * n + j] = s / l.data[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` by forward substitution.
pub fn solve_lower(l: &LowerTriangular, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_solve_dims(l, b)?;
    Ok(forward_substitute(l.as_dense(), b))
}

/// Solves `Lᵀ X = B` by back substitution.
pub fn solve_lower_transpose(l: &LowerTriangular, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_solve_dims(l, b)?;
    Ok(back_substitute(l.as_dense(), b))
}

fn check_solve_dims(l: &LowerTriangular, b: &DenseMatrix) -> Result<()> {
    if l.dim() != b.rows() {
        return Err(Error::dims(format!(
            "triangular solve: factor is {}x{}, rhs has {} rows",
            l.dim(),
            l.dim(),
            b.rows()
        )));
    }
    Ok(())
}

pub(crate) fn forward_substitute(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let nc = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        let (done, rest) = x.data.split_at_mut(i * nc);
        let xi = &mut rest[..nc];
        for k in 0..i {
            let lik = l.data[i * n + k];
            if lik != 0.0 {
                let xk = &done[k * nc..(k + 1) * nc];
                for (a, &v) in xi.iter_mut().zip(xk) {
                    *a -= lik * v;
                }
            }
        }
        let inv = 1.0 / l.data[i * n + i];
        for a in xi.iter_mut() {
            *a *= inv;
        }
    }
    x
}

pub(crate) fn back_substitute(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let nc = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let (head, tail) = x.data.split_at_mut((i + 1) * nc);
        let xi = &mut head[i * nc..];
        for k in i + 1..n {
            let lki = l.data[k * n + i];
            if lki != 0.0 {
                let xk = &tail[(k - i - 1) * nc..(k - i) * nc];
                for (a, &v) in xi.iter_mut().zip(xk) {
                    *a -= lki * v;
                }
            }
        }
        let inv = 1.0 / l.data[i * n + i];
        for a in xi.iter_mut() {
            *a *= inv;
        }
    }
    x
}

/// `ln det(L Lᵀ) = 2 Σ ln L_ii`.
pub fn logdet_from_chol(l: &LowerTriangular) -> f64 {
    2.0 * l.as_dense().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::dims("eigenvalues need a square matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    // symmetrise so roundoff asymmetry cannot stall the sweeps
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let total: f64 = a.data.iter().map(|v| v * v).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig = a.diagonal();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn symmetric_spectral_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?
        .into_iter()
        .fold(0.0, |acc, v| acc.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DenseMatrix {
        DenseMatrix::new(2, 2, vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn cholesky_of_identity_uses_no_jitter() {
        let c = cholesky_jitter(&DenseMatrix::identity(2), &JitterLadder::default()).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert_eq!(c.lower.as_dense(), &DenseMatrix::identity(2));
    }

    #[test]
    fn cholesky_two_by_two_reconstructs() {
        let m = m2(4.0, 2.0, 2.0, 3.0);
        let c = cholesky_jitter(&m, &JitterLadder::default()).unwrap();
        let l = c.lower.as_dense();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
        let r = c.lower.reconstruct().sub(&m).unwrap();
        assert!(r.frobenius_norm() / m.frobenius_norm() <= 1e-10);
    }

    #[test]
    fn indefinite_matrix_fails_on_small_ladder() {
        // eigenvalues of [[1,2],[2,1]] are 3 and -1, so any rung < 1 fails
        let m = m2(1.0, 2.0, 2.0, 1.0);
        let eig = symmetric_eigenvalues(&m).unwrap();
        assert!((eig[0] + 1.0).abs() < 1e-12);
        let ladder = JitterLadder(vec![0.0, 1e-8, 1e-6, 1e-4, 1e-2]);
        assert!(matches!(
            cholesky_jitter(&m, &ladder),
            Err(Error::FactorizationFailure { .. })
        ));
        // a rung above |λ_min| succeeds
        let c = cholesky_jitter(&m, &JitterLadder(vec![0.5, 1.5])).unwrap();
        assert!(c.jitter >= 1.0);
    }

    #[test]
    fn cholesky_rejects_non_square() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            cholesky_jitter(&m, &JitterLadder::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn solve_lower_examples() {
        let l = LowerTriangular::new(DenseMatrix::identity(3)).unwrap();
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        assert_eq!(solve_lower(&l, &b).unwrap(), b);

        let l = LowerTriangular::new(m2(2.0, 0.0, 1.0, 2f64.sqrt())).unwrap();
        let b = DenseMatrix::column(&[2.0, 1.0 + 2f64.sqrt()]);
        let x = solve_lower(&l, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-14);

        let bad = DenseMatrix::zeros(3, 1);
        assert!(matches!(
            solve_lower(&l, &bad),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn solve_lower_transpose_multiplies_back() {
        let l = LowerTriangular::new(DenseMatrix::new(3, 3, vec![
            2.0, 0.0, 0.0, //
            0.5, 1.5, 0.0, //
            -1.0, 0.3, 0.7,
        ]).unwrap())
        .unwrap();
        let b = DenseMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.3));
        let x = solve_lower_transpose(&l, &b).unwrap();
        let back = l.as_dense().matmul_tn(&x).unwrap();
        assert!(back.sub(&b).unwrap().frobenius_norm() <= 1e-12 * b.frobenius_norm());
    }

    #[test]
    fn logdet_examples() {
        let ladder = JitterLadder::default();
        let i3 = cholesky_jitter(&DenseMatrix::identity(3), &ladder).unwrap();
        assert_eq!(logdet_from_chol(&i3.lower), 0.0);
        let two = cholesky_jitter(&DenseMatrix::identity(3).scale(2.0), &ladder).unwrap();
        assert!((logdet_from_chol(&two.lower) - 3.0 * 2f64.ln()).abs() < 1e-12);
        let c = cholesky_jitter(&m2(4.0, 2.0, 2.0, 3.0), &ladder).unwrap();
        assert!((logdet_from_chol(&c.lower) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal_and_rotation() {
        let d = DenseMatrix::new(3, 3, vec![3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![-1.0, 2.0, 3.0]);
        assert!((symmetric_spectral_norm(&d).unwrap() - 3.0).abs() < 1e-14);
        let m = m2(2.0, 1.0, 1.0, 2.0);
        let e = symmetric_eigenvalues(&m).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-13 && (e[1] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn gemm_transposes_agree() {
        let a = DenseMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let b = DenseMatrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let direct = a.transpose().matmul(&b).unwrap();
        assert_eq!(a.matmul_tn(&b).unwrap(), direct);
        let bt = b.transpose();
        assert_eq!(a.transpose().matmul_nt(&bt).unwrap(), direct);
    }
}
