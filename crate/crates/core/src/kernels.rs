//! Covariance functions on points and on diagonal Gaussian moments.
//!
//! Convention: every exponent is `−Σ_d Δ²_d / l²_d` with no factor ½. The
//! stored lengthscale parameter is `l²_d` itself.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Signal variance and per-dimension squared lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(variance) || !lengthscales.iter().all(|&l| ok(l)) {
            return Err(Error::InvalidSpec(format!(
                "kernel parameters must be positive and finite: σ²={variance}, l²={lengthscales:?}"
            )));
        }
        Ok(Self { variance, lengthscales })
    }

    /// Same squared lengthscale in every dimension.
    pub fn isotropic(variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::dims(format!(
                "moment mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::NumericalIntegrity(
                "moment variances must be finite and nonnegative".into(),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NumericalIntegrity("non-finite moment mean".into()));
        }
        Ok(Self { mean, variance })
    }

    /// Univariate shorthand.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], vec![variance])
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self { mean: x.to_vec(), variance: vec![0.0; x.len()] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A Euclidean point paired with Gaussian moments, the input of the hybrid
/// kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridInput {
    pub point: Vec<f64>,
    pub moments: GaussianMoments,
}

/// Squared 2-Wasserstein distance between univariate Gaussians.
pub fn w2_sq_univariate(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::dims("w2_sq_univariate expects one-dimensional moments"));
    }
    Ok(w2_sq_term(a.mean[0], a.variance[0], b.mean[0], b.variance[0]))
}

#[inline]
fn w2_sq_term(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let dm = m1 - m2;
    let ds = v1.sqrt() - v2.sqrt();
    dm * dm + ds * ds
}

fn check_points(x: &DenseMatrix, p: &KernelParams, what: &str) -> Result<()> {
    if x.cols() != p.dim() {
        return Err(Error::dims(format!(
            "{what}: inputs have {} dims, kernel has {}",
            x.cols(),
            p.dim()
        )));
    }
    Ok(())
}

/// Squared-exponential ARD Gram matrix between the rows of `x1` and `x2`.
pub fn se_ard(x1: &DenseMatrix, x2: &DenseMatrix, p: &KernelParams) -> Result<DenseMatrix> {
    check_points(x1, p, "se_ard")?;
    check_points(x2, p, "se_ard")?;
    Ok(DenseMatrix::from_fn(x1.rows(), x2.rows(), |i, j| {
        let r: f64 = x1
            .row(i)
            .iter()
            .zip(x2.row(j))
            .zip(&p.lengthscales)
            .map(|((a, b), l)| (a - b) * (a - b) / l)
            .sum();
        p.variance * (-r).exp()
    }))
}

fn check_moments(a: &[GaussianMoments], d: usize, what: &str) -> Result<()> {
    if let Some(bad) = a.iter().find(|m| m.dim() != d) {
        return Err(Error::dims(format!(
            "{what}: moments of dim {} but kernel has {d}",
            bad.dim()
        )));
    }
    Ok(())
}

fn w2_exponent(a: &GaussianMoments, b: &GaussianMoments, ls: &[f64]) -> f64 {
    (0..ls.len())
        .map(|d| w2_sq_term(a.mean[d], a.variance[d], b.mean[d], b.variance[d]) / ls[d])
        .sum()
}

/// `σ² exp(−Σ_d W₂²(a_d, b_d) / l²_d)` for every pair.
pub fn w2_kernel(a: &[GaussianMoments], b: &[GaussianMoments], p: &KernelParams) -> Result<DenseMatrix> {
    check_moments(a, p.dim(), "w2_kernel")?;
    check_moments(b, p.dim(), "w2_kernel")?;
    Ok(DenseMatrix::from_fn(a.len(), b.len(), |i, j| {
        p.variance * (-w2_exponent(&a[i], &b[j], &p.lengthscales)).exp()
    }))
}

/// SE Gram on the points times `exp(−Σ_d W₂²/l²_d)` on the moments.
/// The overall scale comes from `euclidean.variance`.
pub fn hybrid_kernel(
    a: &[HybridInput],
    b: &[HybridInput],
    euclidean: &KernelParams,
    moment_lengthscales: &[f64],
) -> Result<DenseMatrix> {
    let d = euclidean.dim();
    let md = moment_lengthscales.len();
    for x in a.iter().chain(b) {
        if x.point.len() != d || x.moments.dim() != md {
            return Err(Error::dims("hybrid_kernel: component dimension mismatch"));
        }
    }
    let pa = DenseMatrix::from_fn(a.len(), d, |i, k| a[i].point[k]);
    let pb = DenseMatrix::from_fn(b.len(), d, |i, k| b[i].point[k]);
    let se = se_ard(&pa, &pb, euclidean)?;
    Ok(DenseMatrix::from_fn(a.len(), b.len(), |i, j| {
        se.get(i, j) * (-w2_exponent(&a[i].moments, &b[j].moments, moment_lengthscales)).exp()
    }))
}

/// Differentiable SE ARD: `variance` is 1×1, `lengthscales` is 1×D.
pub fn se_ard_var<'t>(x: Var<'t>, z: Var<'t>, variance: Var<'t>, lengthscales: Var<'t>) -> Var<'t> {
    let s = lengthscales.sqrt();
    let d = (x / s).sq_dist(z / s);
    (-d).exp() * variance
}

/// Differentiable diagonal-moment features `[m, √v]`; the W2 kernel is SE
/// on these features with each lengthscale used twice.
pub fn w2_features<'t>(mean: Var<'t>, var: Var<'t>) -> Var<'t> {
    concat_cols(&[mean, var.sqrt()])
}

/// Differentiable W2 kernel between moment batches given as (mean, var)
/// matrices of shape N×D.
pub fn w2_kernel_var<'t>(
    a: (Var<'t>, Var<'t>),
    b: (Var<'t>, Var<'t>),
    variance: Var<'t>,
    lengthscales: Var<'t>,
) -> Var<'t> {
    let ls2 = concat_cols(&[lengthscales, lengthscales]);
    se_ard_var(w2_features(a.0, a.1), w2_features(b.0, b.1), variance, ls2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::numerics::symmetric_eigenvalues;
    use proptest::prelude::*;

    fn g(m: f64, v: f64) -> GaussianMoments {
        GaussianMoments::scalar(m, v).unwrap()
    }

    #[test]
    fn se_examples() {
        let p = KernelParams::new(1.0, vec![1.0]).unwrap();
        let x = DenseMatrix::column(&[0.0]);
        let y = DenseMatrix::column(&[1.0]);
        assert_eq!(se_ard(&x, &x, &p).unwrap().get(0, 0), 1.0);
        assert!((se_ard(&x, &y, &p).unwrap().get(0, 0) - (-1f64).exp()).abs() < 1e-15);
        assert!((se_ard(&x, &y, &p).unwrap().get(0, 0) - 0.36788).abs() < 1e-5);
        let a = DenseMatrix::from_fn(3, 1, |i, _| i as f64);
        let b = DenseMatrix::from_fn(2, 1, |i, _| 0.5 * i as f64);
        assert_eq!(se_ard(&a, &b, &p).unwrap().transpose(), se_ard(&b, &a, &p).unwrap());
        let bad = DenseMatrix::zeros(2, 2);
        assert!(matches!(se_ard(&bad, &a, &p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn w2_examples() {
        assert_eq!(w2_sq_univariate(&g(0.0, 1.0), &g(0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(w2_sq_univariate(&g(1.0, 4.0), &g(0.0, 1.0)).unwrap(), 2.0);
        assert_eq!(w2_sq_univariate(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap(), 1.0);
        let p = KernelParams::new(1.0, vec![1.0]).unwrap();
        let k = w2_kernel(&[g(0.0, 1.0)], &[g(1.0, 4.0)], &p).unwrap();
        assert!((k.get(0, 0) - (-2f64).exp()).abs() < 1e-15);
        assert!((k.get(0, 0) - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn hybrid_example_is_product_of_factors() {
        let p = KernelParams::new(1.0, vec![1.0]).unwrap();
        let a = HybridInput { point: vec![0.0], moments: g(0.0, 1.0) };
        let b = HybridInput { point: vec![1.0], moments: g(1.0, 4.0) };
        let k = hybrid_kernel(std::slice::from_ref(&a), std::slice::from_ref(&b), &p, &[1.0]).unwrap();
        assert!((k.get(0, 0) - (-3f64).exp()).abs() < 1e-15);
        assert!((k.get(0, 0) - 0.04979).abs() < 1e-5);
        let diag = hybrid_kernel(std::slice::from_ref(&a), std::slice::from_ref(&a), &p, &[1.0]).unwrap();
        assert_eq!(diag.get(0, 0), 1.0);
    }

    #[test]
    fn differentiable_kernels_match_plain() {
        let p = KernelParams::new(1.7, vec![0.6, 2.5]).unwrap();
        let ms: Vec<GaussianMoments> = (0..4)
            .map(|i| GaussianMoments::new(vec![i as f64 * 0.3, -0.2 * i as f64], vec![0.1 * i as f64, 1.0]).unwrap())
            .collect();
        let plain = w2_kernel(&ms, &ms, &p).unwrap();
        let tape = Tape::new();
        let m = tape.constant(DenseMatrix::from_fn(4, 2, |i, d| ms[i].mean[d]));
        let v = tape.constant(DenseMatrix::from_fn(4, 2, |i, d| ms[i].variance[d]));
        let s = tape.constant(DenseMatrix::scalar(p.variance));
        let l = tape.constant(DenseMatrix::row_vector(&p.lengthscales));
        let k = w2_kernel_var((m, v), (m, v), s, l).value();
        // √v is floored at 1e-6 on the tape, so exact zeros differ slightly
        assert!(k.sub(&plain).unwrap().max_abs() < 1e-5);
        let se_plain = se_ard(&m.value(), &m.value(), &p).unwrap();
        let se_tape = se_ard_var(m, m, s, l).value();
        assert!(se_tape.sub(&se_plain).unwrap().max_abs() < 1e-14);
    }

    fn moment_strategy(d: usize) -> impl Strategy<Value = GaussianMoments> {
        (
            proptest::collection::vec(-3.0..3.0f64, d),
            proptest::collection::vec(0.0..4.0f64, d),
        )
            .prop_map(|(m, v)| GaussianMoments::new(m, v).unwrap())
    }

    proptest! {
        #[test]
        fn w2_is_a_squared_metric(a in moment_strategy(1), b in moment_strategy(1), c in moment_strategy(1)) {
            let d = |x: &GaussianMoments, y: &GaussianMoments| w2_sq_univariate(x, y).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &c).sqrt() <= d(&a, &b).sqrt() + d(&b, &c).sqrt() + 1e-10);
            if a != b {
                prop_assert!(d(&a, &b) > 0.0);
            }
        }

        #[test]
        fn gram_matrices_are_psd(
            ms in proptest::collection::vec(moment_strategy(2), 1..6),
            var in 0.1..5.0f64,
            l1 in 0.1..4.0f64,
            l2 in 0.1..4.0f64,
        ) {
            let p = KernelParams::new(var, vec![l1, l2]).unwrap();
            let k = w2_kernel(&ms, &ms, &p).unwrap();
            prop_assert!(k.is_symmetric(0.0));
            for i in 0..ms.len() {
                prop_assert_eq!(k.get(i, i), var);
            }
            let e = symmetric_eigenvalues(&k).unwrap();
            prop_assert!(e[0] >= -1e-8 * var, "min eigenvalue {}", e[0]);

            let x = DenseMatrix::from_fn(ms.len(), 2, |i, d| ms[i].mean[d]);
            let se = se_ard(&x, &x, &p).unwrap();
            prop_assert!(symmetric_eigenvalues(&se).unwrap()[0] >= -1e-8 * var);

            let hy: Vec<HybridInput> = ms.iter().map(|m| HybridInput { point: m.variance.clone(), moments: m.clone() }).collect();
            let h = hybrid_kernel(&hy, &hy, &p, &[l2, l1]).unwrap();
            prop_assert!(h.is_symmetric(0.0));
            prop_assert!(symmetric_eigenvalues(&h).unwrap()[0] >= -1e-8 * var);
        }

        #[test]
        fn zero_variance_w2_equals_se(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 3), 1..5),
            l in proptest::collection::vec(0.1..3.0f64, 3),
        ) {
            let p = KernelParams::new(1.3, l).unwrap();
            let ms: Vec<_> = pts.iter().map(|x| GaussianMoments::dirac(x)).collect();
            let x = DenseMatrix::from_fn(pts.len(), 3, |i, d| pts[i][d]);
            prop_assert_eq!(w2_kernel(&ms, &ms, &p).unwrap(), se_ard(&x, &x, &p).unwrap());
        }
    }
}
