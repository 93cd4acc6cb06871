//! Lipschitz constants of affine moment convolutions and W2-kernel GP
//! activations, with sampled-pair audits of both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_jitter, gemm, solve_lower, solve_lower_transpose, symmetric_spectral_norm, DenseMatrix};
use crate::svgp::InducingSet;

use super::layers::{distgp_activation, AffineOperator, DistGpLayer, MomentMap};
use super::spec::MapShape;

/// Additive slack of every audit inequality.
pub const AUDIT_SLACK: f64 = 1e-8;

/// Largest inducing count for which the exact spectral norm is computed.
pub const MAX_EXACT_INDUCING: usize = 250;

/// `√C · max_col ‖A_col‖²`, `C` the column length (fan-in).
pub fn lipschitz_bound_affine(a: &AffineOperator) -> f64 {
    let c = a.column_len() as f64;
    let max_sq = (0..a.weights.cols())
        .map(|j| a.weights.col(j).iter().map(|x| x * x).sum::<f64>())
        .fold(0.0, f64::max);
    c.sqrt() * max_sq
}

/// Per-output and summed DistGP Lipschitz constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistGpBound {
    /// `(4σ²/l)² [‖K⁻¹m_c‖² + ‖K⁻¹(K−S_c)K⁻¹‖₂]` per output channel.
    pub per_output: Vec<f64>,
    /// Sum over outputs; bounds the product-measure distance.
    pub total: f64,
    /// Squared lengthscale used: the smallest across input dimensions.
    pub lengthscale_sq: f64,
}

fn layer_kuu(layer: &DistGpLayer) -> Result<DenseMatrix> {
    let (mean, var) = match &layer.inducing {
        InducingSet::Distributional { mean, variance } => (mean, variance),
        InducingSet::Euclidean(_) => {
            return Err(Error::InvalidSpec("DistGP layer needs a distributional inducing set".into()))
        }
    };
    let m = mean.rows();
    let ls = &layer.kernel.lengthscales;
    let mut k = DenseMatrix::from_fn(m, m, |i, j| {
        let mut e = 0.0;
        for d in 0..mean.cols() {
            let dm = mean.get(i, d) - mean.get(j, d);
            let ds = var.get(i, d).sqrt() - var.get(j, d).sqrt();
            e += (dm * dm + ds * ds) / ls[d];
        }
        layer.kernel.variance * (-e).exp()
    });
    k.add_diagonal(layer.jitter);
    Ok(k)
}

/// Lipschitz constant of a W2-kernel GP activation. Only defined for
/// `M ≤ 250`, where the spectral norm is computed exactly.
pub fn lipschitz_bound_distgp(layer: &DistGpLayer) -> Result<DistGpBound> {
    let m = layer.inducing.count();
    if m > MAX_EXACT_INDUCING {
        return Err(Error::dims(format!("{m} inducing points exceeds the exact limit {MAX_EXACT_INDUCING}")));
    }
    let k = layer_kuu(layer)?;
    let chol = cholesky_jitter(&k, &Default::default())?;
    let l = &chol.lower;
    let kinv = solve_lower_transpose(l, &solve_lower(l, &DenseMatrix::identity(m))?)?;
    let sigma2 = layer.kernel.variance;
    let l2 = layer.kernel.lengthscales.iter().copied().fold(f64::INFINITY, f64::min);
    let pre = 16.0 * sigma2 * sigma2 / l2;
    let mut per_output = Vec::with_capacity(layer.posterior.outputs());
    for c in 0..layer.posterior.outputs() {
        let mc = DenseMatrix::column(&layer.posterior.mean.col(c));
        let a = solve_lower_transpose(l, &solve_lower(l, &mc)?)?;
        let mean_term: f64 = a.data().iter().map(|x| x * x).sum();
        let ks = gemm(&kinv, false, layer.posterior.factors[c].as_dense(), false)?;
        let ksk = gemm(&ks, false, &ks, true)?;
        let x = kinv.sub(&ksk)?;
        let x = x.add(&x.transpose())?.scale(0.5);
        per_output.push(pre * (mean_term + symmetric_spectral_norm(&x)?));
    }
    let total = per_output.iter().sum();
    Ok(DistGpBound { per_output, total, lengthscale_sq: l2 })
}

/// Outcome of a sampled-pair audit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pairs: usize,
    /// The constant `L` being audited.
    pub bound: f64,
    /// Pairs with `W₂(f μ, f ν) > L·W₂(μ, ν) + slack`.
    pub violations: usize,
    /// Pairs with `W₂²(f μ, f ν) > L·W₂²(μ, ν) + slack`.
    pub violations_squared: usize,
    /// Pairs with `W₂(f μ, f ν) > (1 + slack)·W₂(μ, ν)`.
    pub expansions: usize,
    /// Largest observed `W₂(f μ, f ν) / W₂(μ, ν)`.
    pub max_ratio: f64,
}

impl AuditReport {
    fn record(&mut self, w_in: f64, w_out: f64) {
        self.pairs += 1;
        if w_out > self.bound * w_in + AUDIT_SLACK {
            self.violations += 1;
        }
        if w_out * w_out > self.bound * w_in * w_in + AUDIT_SLACK {
            self.violations_squared += 1;
        }
        if w_out > (1.0 + AUDIT_SLACK) * w_in {
            self.expansions += 1;
        }
        if w_in > 0.0 {
            self.max_ratio = self.max_ratio.max(w_out / w_in);
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Audits every output column of `a` as a map from the `k·k·C_in` input
/// moments of one patch to one output moment, over random pairs.
pub fn audit_affine(a: &AffineOperator, pairs: usize, seed: u64) -> AuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.column_len();
    let mut report = AuditReport { bound: lipschitz_bound_affine(a), ..Default::default() };
    let cols: Vec<Vec<f64>> = (0..a.weights.cols()).map(|j| a.weights.col(j)).collect();
    for _ in 0..pairs {
        let scale = (normal(&mut rng) * 1.5).exp();
        let (m1, s1): (Vec<f64>, Vec<f64>) = (0..n).map(|_| (normal(&mut rng), normal(&mut rng).abs())).unzip();
        let (m2, s2): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| (m1[i] + scale * normal(&mut rng), (s1[i] + scale * normal(&mut rng)).abs()))
            .unzip();
        let w_in = (0..n).map(|i| (m1[i] - m2[i]).powi(2) + (s1[i] - s2[i]).powi(2)).sum::<f64>().sqrt();
        let mut worst = 0.0f64;
        for col in &cols {
            let mut dm = 0.0;
            let (mut v1, mut v2) = (0.0, 0.0);
            for i in 0..n {
                dm += col[i] * (m1[i] - m2[i]);
                v1 += col[i] * col[i] * s1[i] * s1[i];
                v2 += col[i] * col[i] * s2[i] * s2[i];
            }
            let w = (dm * dm + (v1.sqrt() - v2.sqrt()).powi(2)).sqrt();
            worst = worst.max(w);
        }
        report.record(w_in, worst);
    }
    report
}

/// Audits a DistGP activation against its bound on pairs `(μ, ν)` with
/// `0.125 ≤ W₂(μ, ν)/l² ≤ 1`. Centres `μ` are perturbed inducing moments.
pub fn audit_distgp(layer: &DistGpLayer, pairs: usize, seed: u64) -> Result<AuditReport> {
    let bound = lipschitz_bound_distgp(layer)?;
    let (zm, zv) = match &layer.inducing {
        InducingSet::Distributional { mean, variance } => (mean, variance),
        InducingSet::Euclidean(_) => {
            return Err(Error::InvalidSpec("DistGP layer needs a distributional inducing set".into()))
        }
    };
    let d = zm.cols();
    let l2 = bound.lengthscale_sq;
    let l = l2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = DenseMatrix::zeros(2 * pairs, d);
    let mut var = DenseMatrix::zeros(2 * pairs, d);
    let mut w_in = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let r = rng.random_range(0..zm.rows());
        let m1: Vec<f64> = (0..d).map(|j| zm.get(r, j) + 0.25 * l * normal(&mut rng)).collect();
        let s1: Vec<f64> = (0..d).map(|j| zv.get(r, j).sqrt() * (0.2 * normal(&mut rng)).exp()).collect();
        let target = rng.random_range(0.125..=1.0) * l2;
        // direction in (mean, std) space, redrawn until the stds stay positive
        let (m2, s2) = loop {
            let dir: Vec<f64> = (0..2 * d).map(|_| normal(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let m2: Vec<f64> = (0..d).map(|j| m1[j] + target * dir[j] / norm).collect();
            let s2: Vec<f64> = (0..d).map(|j| s1[j] + target * dir[d + j] / norm).collect();
            if s2.iter().all(|&s| s >= 0.0) {
                break (m2, s2);
            }
        };
        for j in 0..d {
            mean.set(2 * p, j, m1[j]);
            var.set(2 * p, j, s1[j] * s1[j]);
            mean.set(2 * p + 1, j, m2[j]);
            var.set(2 * p + 1, j, s2[j] * s2[j]);
        }
        let w = (0..d).map(|j| (m1[j] - m2[j]).powi(2) + (s1[j] - s2[j]).powi(2)).sum::<f64>().sqrt();
        w_in.push(w);
    }
    let f = MomentMap::new(2 * pairs, MapShape::new(1, 1, d), mean, var)?;
    let out = distgp_activation(&f, layer)?;
    let mut report = AuditReport { bound: bound.total, ..Default::default() };
    for (p, &w) in w_in.iter().enumerate() {
        let mut sq = 0.0;
        for c in 0..out.channels {
            let dm = out.mean.get(2 * p, c) - out.mean.get(2 * p + 1, c);
            let ds = out.variance.get(2 * p, c).sqrt() - out.variance.get(2 * p + 1, c).sqrt();
            sq += dm * dm + ds * ds;
        }
        report.record(w, sq.sqrt());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelParams;
    use crate::net::layers::normalize_affine;
    use crate::net::spec::MeanFunction;
    use crate::numerics::LowerTriangular;
    use crate::svgp::VariationalPosterior;

    fn scalar_layer(m: f64, s: f64, sigma2: f64, l2: f64) -> DistGpLayer {
        let z = InducingSet::distributional(DenseMatrix::scalar(0.3), DenseMatrix::scalar(0.2)).unwrap();
        let q = VariationalPosterior::new(
            DenseMatrix::scalar(m),
            vec![LowerTriangular::new(DenseMatrix::scalar(s.sqrt())).unwrap()],
        )
        .unwrap();
        DistGpLayer {
            inducing: z,
            kernel: KernelParams::new(sigma2, vec![l2]).unwrap(),
            posterior: q,
            mean_function: MeanFunction::Zero,
            jitter: 0.0,
        }
    }

    #[test]
    fn affine_examples() {
        let a = AffineOperator::new(1, 2, DenseMatrix::column(&[3.0, 4.0])).unwrap();
        assert!((lipschitz_bound_affine(&a) - 2f64.sqrt() * 25.0).abs() < 1e-12);
        assert!((lipschitz_bound_affine(&a) - 35.355).abs() < 1e-3);
        let n = normalize_affine(&a).unwrap();
        assert!(lipschitz_bound_affine(&n) <= 1.0);
    }

    #[test]
    fn distgp_scalar_reduction() {
        let (m, s, sigma2, l2) = (0.7, 0.4, 1.5, 0.8);
        let b = lipschitz_bound_distgp(&scalar_layer(m, s, sigma2, l2)).unwrap();
        // K = σ², so K⁻¹m = m/σ² and K⁻¹(K − S)K⁻¹ = (σ² − s)/σ⁴
        let hand = 16.0 * sigma2 * sigma2 / l2 * ((m / sigma2).powi(2) + (1.0 - s / sigma2).abs() / sigma2);
        assert!((b.total - hand).abs() < 1e-12 * hand);
        assert_eq!(b.per_output.len(), 1);
    }

    #[test]
    fn distgp_prior_posterior_has_zero_bound() {
        let mean = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let var = DenseMatrix::filled(3, 2, 0.3);
        let z = InducingSet::distributional(mean, var).unwrap();
        let kernel = KernelParams::isotropic(1.2, 0.7, 2).unwrap();
        let q = VariationalPosterior::prior(&z, &kernel, 2).unwrap();
        let layer = DistGpLayer { inducing: z, kernel, posterior: q, mean_function: MeanFunction::Zero, jitter: 0.0 };
        let b = lipschitz_bound_distgp(&layer).unwrap();
        assert!(b.total.abs() < 1e-9, "{}", b.total);
    }

    #[test]
    fn audits_hold_for_normalized_operator() {
        let w = DenseMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = normalize_affine(&AffineOperator::new(2, 3, w).unwrap()).unwrap();
        let r = audit_affine(&a, 2000, 1);
        assert_eq!(r.pairs, 2000);
        assert_eq!(r.violations, 0);
        assert_eq!(r.violations_squared, 0);
        assert_eq!(r.expansions, 0);
        // the normalised column norm is tight against the bound
        assert!(r.max_ratio <= r.bound * (1.0 + 1e-9));
    }

    #[test]
    fn audit_distgp_runs_on_random_layer() {
        let layer = scalar_layer(0.5, 0.3, 1.0, 1.0);
        let r = audit_distgp(&layer, 200, 2).unwrap();
        assert_eq!(r.pairs, 200);
        assert_eq!(r.violations_squared, 0);
    }
}
