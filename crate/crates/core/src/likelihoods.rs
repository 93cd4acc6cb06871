//! Gaussian regression and Dirichlet-based classification heads.
//!
//! Classification labels become log-normal moment-matched regression
//! targets: class `c` gets concentration `α_c = 1 + α_ε` when it is the
//! label and `α_ε` otherwise, then
//! `σ̃²_c = ln(1/α_c + 1)` and `μ̃_c = ln α_c − σ̃²_c / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Default `α_ε`.
pub const DEFAULT_ALPHA_EPSILON: f64 = 0.01;

/// Default Monte Carlo sample count for class probabilities.
pub const DEFAULT_MC_SAMPLES: usize = 256;

/// Per-example, per-class heteroskedastic regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletTargets {
    /// N×K `μ̃`.
    pub mean: DenseMatrix,
    /// N×K `σ̃²`.
    pub variance: DenseMatrix,
    pub alpha_epsilon: f64,
}

/// `(μ̃, σ̃²)` for one concentration `α`.
pub fn lognormal_match(alpha: f64) -> (f64, f64) {
    let s2 = (1.0 / alpha).ln_1p();
    (alpha.ln() - 0.5 * s2, s2)
}

pub fn dirichlet_transform(labels: &[usize], num_classes: usize, alpha_epsilon: f64) -> Result<DirichletTargets> {
    if !(alpha_epsilon > 0.0 && alpha_epsilon < 0.5) {
        return Err(Error::InvalidAlpha(alpha_epsilon));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::dims(format!("label {bad} with {num_classes} classes")));
    }
    let on = lognormal_match(1.0 + alpha_epsilon);
    let off = lognormal_match(alpha_epsilon);
    let pick = |i: usize, c: usize| if labels[i] == c { on } else { off };
    Ok(DirichletTargets {
        mean: DenseMatrix::from_fn(labels.len(), num_classes, |i, c| pick(i, c).0),
        variance: DenseMatrix::from_fn(labels.len(), num_classes, |i, c| pick(i, c).1),
        alpha_epsilon,
    })
}

/// `Σ E_{N(f | m, v)}[log N(μ̃ | f, σ̃²)]` in closed form.
pub fn heteroskedastic_expected_loglik(
    pred_mean: &DenseMatrix,
    pred_var: &DenseMatrix,
    targets: &DirichletTargets,
) -> Result<f64> {
    if pred_mean.shape() != targets.mean.shape() || pred_var.shape() != targets.mean.shape() {
        return Err(Error::dims(format!(
            "predictions {:?}/{:?} vs targets {:?}",
            pred_mean.shape(),
            pred_var.shape(),
            targets.mean.shape()
        )));
    }
    let mut total = 0.0;
    for k in 0..pred_mean.len() {
        let (m, v) = (pred_mean.data()[k], pred_var.data()[k]);
        let (t, s2) = (targets.mean.data()[k], targets.variance.data()[k]);
        total += -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - ((t - m).powi(2) + v) / (2.0 * s2);
    }
    Ok(total)
}

/// Differentiable counterpart of [`heteroskedastic_expected_loglik`];
/// `target_mean` and `target_var` are tape constants of the same shape.
pub fn heteroskedastic_expected_loglik_var<'t>(
    pred_mean: Var<'t>,
    pred_var: Var<'t>,
    target_mean: Var<'t>,
    target_var: Var<'t>,
) -> Var<'t> {
    let log_norm = (target_var.scale(2.0 * std::f64::consts::PI)).ln().scale(-0.5);
    let quad = ((target_mean - pred_mean).square() + pred_var) / target_var.scale(2.0);
    (log_norm - quad).sum()
}

/// Monte Carlo class probabilities with per-entry standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs {
    /// N×K, rows sum to one.
    pub probs: DenseMatrix,
    /// N×K standard errors of the MC means.
    pub std_err: DenseMatrix,
    /// N standard errors of the predictive entropy (delta method).
    pub entropy_std_err: Vec<f64>,
}

fn softmax_into(f: &[f64], out: &mut [f64]) {
    let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(f) {
        *o = (v - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `E[softmax(f)]` under `f ~ N(mean, diag(var))`, per row, from `samples`
/// draws of a generator seeded with `seed`.
pub fn predict_class_probs(mean: &DenseMatrix, var: &DenseMatrix, samples: usize, seed: u64) -> Result<ClassProbs> {
    if mean.shape() != var.shape() {
        return Err(Error::dims("class mean and variance shapes differ"));
    }
    if samples == 0 {
        return Err(Error::Config("need at least one Monte Carlo sample".into()));
    }
    let (n, k) = mean.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = DenseMatrix::zeros(n, k);
    let mut std_err = DenseMatrix::zeros(n, k);
    let mut entropy_std_err = vec![0.0; n];
    let mut f = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut draws = vec![0.0; samples * k];
    for i in 0..n {
        let sd: Vec<f64> = var.row(i).iter().map(|v| v.max(0.0).sqrt()).collect();
        for s in 0..samples {
            for c in 0..k {
                let e: f64 = StandardNormal.sample(&mut rng);
                f[c] = mean.get(i, c) + sd[c] * e;
            }
            softmax_into(&f, &mut p);
            draws[s * k..(s + 1) * k].copy_from_slice(&p);
        }
        let sn = samples as f64;
        let avg: Vec<f64> = (0..k).map(|c| (0..samples).map(|s| draws[s * k + c]).sum::<f64>() / sn).collect();
        let grad: Vec<f64> = avg.iter().map(|&q| if q > 0.0 { -(q.ln() + 1.0) } else { 0.0 }).collect();
        let mut h_sum = 0.0;
        let mut h_sq = 0.0;
        for c in 0..k {
            let mut sq = 0.0;
            for s in 0..samples {
                sq += (draws[s * k + c] - avg[c]).powi(2);
            }
            let denom = if samples > 1 { sn * (sn - 1.0) } else { 1.0 };
            std_err.set(i, c, (sq / denom).sqrt());
            probs.set(i, c, avg[c]);
        }
        for s in 0..samples {
            let proj: f64 = (0..k).map(|c| grad[c] * draws[s * k + c]).sum();
            h_sum += proj;
            h_sq += proj * proj;
        }
        let h_mean = h_sum / sn;
        let h_var = if samples > 1 { (h_sq - sn * h_mean * h_mean).max(0.0) / (sn - 1.0) } else { 0.0 };
        entropy_std_err[i] = (h_var / sn).sqrt();
    }
    Ok(ClassProbs { probs, std_err, entropy_std_err })
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidDistribution(format!("negative or non-finite entry in {probs:?}")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {s}")));
    }
    Ok(probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
}
