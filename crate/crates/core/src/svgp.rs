//! Sparse variational GP: predictive moments, the KL term, the uncollapsed
//! bound, the collapsed (Titsias) bound and the split of predictive
//! variance into distributional and within-data parts.
//!
//! All heavy lifting happens on an autodiff [`Tape`] so the same code
//! serves prediction and training. The plain-value functions below place
//! their inputs on a throwaway tape as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{se_ard_var, w2_kernel_var, KernelParams};
use crate::numerics::{cholesky_jitter, DenseMatrix, JitterLadder, LowerTriangular};

/// Negative variances above this are roundoff and get clamped to zero.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;

/// Floor used by the differential entropy.
pub const ENTROPY_VARIANCE_FLOOR: f64 = 1e-12;

/// Inducing locations: plain points, or diagonal Gaussians for the
/// Wasserstein kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum InducingSet {
    /// M×D matrix of points.
    Euclidean(DenseMatrix),
    /// M×D means and strictly positive M×D variances.
    Distributional { mean: DenseMatrix, variance: DenseMatrix },
}

impl InducingSet {
    pub fn distributional(mean: DenseMatrix, variance: DenseMatrix) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return Err(Error::dims("inducing mean and variance shapes differ"));
        }
        if variance.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NumericalIntegrity(
                "distributional inducing variances must be positive".into(),
            ));
        }
        Self::check_count(mean.rows())?;
        Ok(Self::Distributional { mean, variance })
    }

    pub fn euclidean(points: DenseMatrix) -> Result<Self> {
        Self::check_count(points.rows())?;
        Ok(Self::Euclidean(points))
    }

    fn check_count(m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::InvalidSpec("need at least one inducing point".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        match self {
            Self::Euclidean(z) => z.rows(),
            Self::Distributional { mean, .. } => mean.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Euclidean(z) => z.cols(),
            Self::Distributional { mean, .. } => mean.cols(),
        }
    }

    /// Applies a row permutation.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |m: &DenseMatrix| DenseMatrix::from_fn(perm.len(), m.cols(), |i, j| m.get(perm[i], j));
        match self {
            Self::Euclidean(z) => Self::Euclidean(pick(z)),
            Self::Distributional { mean, variance } => Self::Distributional {
                mean: pick(mean),
                variance: pick(variance),
            },
        }
    }
}

/// Inputs to an SVGP: plain points or diagonal Gaussian moments, each with
/// one row per input.
#[derive(Clone, Debug, PartialEq)]
pub enum SvgpInputs {
    Points(DenseMatrix),
    Moments { mean: DenseMatrix, variance: DenseMatrix },
}

impl SvgpInputs {
    pub fn len(&self) -> usize {
        match self {
            Self::Points(x) => x.rows(),
            Self::Moments { mean, .. } => mean.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        match self {
            Self::Points(x) => x.cols(),
            Self::Moments { mean, .. } => mean.cols(),
        }
    }
}

/// `q(U) = Π_c N(m_c, L_c L_cᵀ)`, one column of `mean` per output.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    pub mean: DenseMatrix,
    pub factors: Vec<LowerTriangular>,
}

impl VariationalPosterior {
    pub fn new(mean: DenseMatrix, factors: Vec<LowerTriangular>) -> Result<Self> {
        if factors.len() != mean.cols() {
            return Err(Error::dims(format!(
                "{} output columns but {} covariance factors",
                mean.cols(),
                factors.len()
            )));
        }
        if factors.iter().any(|l| l.dim() != mean.rows()) {
            return Err(Error::dims("covariance factor size differs from inducing count"));
        }
        Ok(Self { mean, factors })
    }

    /// `q(U) = p(U)`: zero mean and `S = K_uu` for every output.
    pub fn prior(z: &InducingSet, p: &KernelParams, outputs: usize) -> Result<Self> {
        let kuu = plain_kuu(z, p)?;
        let l = cholesky_jitter(&kuu, &JitterLadder::default())?.lower;
        Self::new(DenseMatrix::zeros(z.count(), outputs), vec![l; outputs])
    }

    pub fn outputs(&self) -> usize {
        self.mean.cols()
    }

    pub fn count(&self) -> usize {
        self.mean.rows()
    }

    /// `S_c = L_c L_cᵀ`.
    pub fn covariance(&self, c: usize) -> DenseMatrix {
        self.factors[c].reconstruct()
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mean = DenseMatrix::from_fn(perm.len(), self.outputs(), |i, j| self.mean.get(perm[i], j));
        let factors = self
            .factors
            .iter()
            .map(|l| {
                let s = l.reconstruct();
                let ps = DenseMatrix::from_fn(perm.len(), perm.len(), |i, j| s.get(perm[i], perm[j]));
                cholesky_jitter(&ps, &JitterLadder::default()).map(|c| c.lower)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mean, factors)
    }
}

/// Gaussian observation noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub noise_variance: f64,
}

impl NoiseModel {
    /// Smallest noise variance the bound accepts.
    pub const MIN_VARIANCE: f64 = 1e-8;

    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= Self::MIN_VARIANCE) || !noise_variance.is_finite() {
            return Err(Error::NumericalIntegrity(format!(
                "noise variance {noise_variance} below {} or not finite",
                Self::MIN_VARIANCE
            )));
        }
        Ok(Self { noise_variance })
    }
}

/// Kernel inputs living on a tape.
#[derive(Clone, Copy, Debug)]
pub enum TapeInputs<'t> {
    Points(Var<'t>),
    Moments(Var<'t>, Var<'t>),
}

impl<'t> TapeInputs<'t> {
    pub fn rows(&self) -> usize {
        match self {
            Self::Points(x) => x.rows(),
            Self::Moments(m, _) => m.rows(),
        }
    }
}

/// SE kernel for points, W2 kernel for moments.
pub fn cross_kernel<'t>(
    a: TapeInputs<'t>,
    b: TapeInputs<'t>,
    variance: Var<'t>,
    lengthscales: Var<'t>,
) -> Var<'t> {
    match (a, b) {
        (TapeInputs::Points(x), TapeInputs::Points(z)) => se_ard_var(x, z, variance, lengthscales),
        (TapeInputs::Moments(m1, v1), TapeInputs::Moments(m2, v2)) => {
            w2_kernel_var((m1, v1), (m2, v2), variance, lengthscales)
        }
        _ => panic!("cross_kernel: mixed input kinds"),
    }
}

/// Everything one SVGP layer produces for a batch of N inputs.
pub struct SvgpTerms<'t> {
    /// N×C predictive means.
    pub mean: Var<'t>,
    /// N×1 `diag(K_ff − Q_ff)`, clamped at zero.
    pub distributional: Var<'t>,
    /// N×C `diag(K_fu K⁻¹ S_c K⁻¹ K_uf)`.
    pub within: Var<'t>,
    /// N×C total predictive variance.
    pub variance: Var<'t>,
    /// 1×1 `Σ_c KL[q(u_c) ‖ p(u_c)]`.
    pub kl: Var<'t>,
    /// Most negative unclamped distributional value (0 if none).
    pub min_raw_distributional: f64,
    /// Number of entries clamped because they were in (−tol, 0).
    pub clamped: usize,
}

/// Core SVGP computation from Gram blocks.
///
/// `kuu` is M×M, `kuf` is M×N, `prior_var` the 1×1 value of `k(x, x)`,
/// `m_u` M×C and `l_s` the C lower-triangular factors of `S`.
pub fn svgp_terms<'t>(
    kuu: Var<'t>,
    kuf: Var<'t>,
    prior_var: Var<'t>,
    m_u: Var<'t>,
    l_s: &[Var<'t>],
    ladder: &JitterLadder,
) -> Result<SvgpTerms<'t>> {
    let m = kuu.rows();
    let c = m_u.cols();
    assert_eq!(l_s.len(), c, "one covariance factor per output");
    let l = kuu.cholesky(ladder)?;
    let a = l.solve_lower(kuf);
    let b = l.solve_lower_t(a);
    let mean = b.matmul_tn(m_u);

    let raw = (prior_var - a.square().sum_rows()).t();
    let (min_raw, clamped) = raw.with_value(|v| {
        let min = v.data().iter().fold(0.0f64, |acc, &x| acc.min(x));
        let n = v.data().iter().filter(|&&x| x < 0.0 && x > -NEGATIVE_VARIANCE_TOLERANCE).count();
        (min, n)
    });
    let distributional = raw.clamp_min(0.0);

    let mut within_cols = Vec::with_capacity(c);
    let mut kl_trace_logdet = Vec::with_capacity(c);
    for &ls in l_s {
        within_cols.push(ls.matmul_tn(b).square().sum_rows().t());
        let li = l.solve_lower(ls);
        kl_trace_logdet.push(li.square().sum() - ls.diag().ln().sum().scale(2.0));
    }
    let within = concat_cols(&within_cols);
    let variance = within + distributional;

    let mahal = l.solve_lower(m_u).square().sum();
    let logdet_k = l.diag().ln().sum().scale(2.0 * c as f64);
    let mut kl = mahal + logdet_k - (m * c) as f64;
    for t in kl_trace_logdet {
        kl = kl + t;
    }
    let kl = kl.scale(0.5);

    Ok(SvgpTerms {
        mean,
        distributional,
        within,
        variance,
        kl,
        min_raw_distributional: min_raw,
        clamped,
    })
}

/// Expected Gaussian log-likelihood `Σ log N(y | μ, σ²) − Σ̃/(2σ²)` summed
/// over all entries; `noise_var` is 1×1.
pub fn gaussian_expected_loglik<'t>(
    y: Var<'t>,
    mean: Var<'t>,
    variance: Var<'t>,
    noise_var: Var<'t>,
) -> Var<'t> {
    let n = (y.rows() * y.cols()) as f64;
    let sq = (y - mean).square().sum() + variance.sum();
    (noise_var.ln().sum() + (2.0 * std::f64::consts::PI).ln()).scale(-0.5 * n) - sq / noise_var.scale(2.0)
}

fn place_inputs<'t>(tape: &'t Tape, x: &SvgpInputs) -> TapeInputs<'t> {
    match x {
        SvgpInputs::Points(p) => TapeInputs::Points(tape.constant(p.clone())),
        SvgpInputs::Moments { mean, variance } => {
            TapeInputs::Moments(tape.constant(mean.clone()), tape.constant(variance.clone()))
        }
    }
}

fn place_inducing<'t>(tape: &'t Tape, z: &InducingSet) -> TapeInputs<'t> {
    match z {
        InducingSet::Euclidean(p) => TapeInputs::Points(tape.constant(p.clone())),
        InducingSet::Distributional { mean, variance } => {
            TapeInputs::Moments(tape.constant(mean.clone()), tape.constant(variance.clone()))
        }
    }
}

fn check_compat(x: &SvgpInputs, z: &InducingSet, p: &KernelParams) -> Result<()> {
    let same_kind = matches!(
        (x, z),
        (SvgpInputs::Points(_), InducingSet::Euclidean(_))
            | (SvgpInputs::Moments { .. }, InducingSet::Distributional { .. })
    );
    if !same_kind {
        return Err(Error::InvalidSpec(
            "input kind does not match inducing kind".into(),
        ));
    }
    if x.dim() != z.dim() || z.dim() != p.dim() {
        return Err(Error::dims(format!(
            "inputs dim {}, inducing dim {}, kernel dim {}",
            x.dim(),
            z.dim(),
            p.dim()
        )));
    }
    if let SvgpInputs::Moments { mean, variance } = x {
        if mean.shape() != variance.shape() {
            return Err(Error::dims("input mean and variance shapes differ"));
        }
    }
    Ok(())
}

fn plain_kuu(z: &InducingSet, p: &KernelParams) -> Result<DenseMatrix> {
    let tape = Tape::new();
    let zt = place_inducing(&tape, z);
    let (s, l) = kernel_vars(&tape, p);
    Ok(cross_kernel(zt, zt, s, l).value())
}

fn kernel_vars<'t>(tape: &'t Tape, p: &KernelParams) -> (Var<'t>, Var<'t>) {
    (
        tape.constant(DenseMatrix::scalar(p.variance)),
        tape.constant(DenseMatrix::row_vector(&p.lengthscales)),
    )
}

struct PlainTerms {
    mean: DenseMatrix,
    distributional: DenseMatrix,
    within: DenseMatrix,
    variance: DenseMatrix,
    kl: f64,
    clamped: usize,
}

fn plain_terms(x: &SvgpInputs, z: &InducingSet, q: &VariationalPosterior, p: &KernelParams) -> Result<PlainTerms> {
    check_compat(x, z, p)?;
    if q.count() != z.count() {
        return Err(Error::dims("posterior size differs from inducing count"));
    }
    let tape = Tape::new();
    let xt = place_inputs(&tape, x);
    let zt = place_inducing(&tape, z);
    let (s, l) = kernel_vars(&tape, p);
    let kuu = cross_kernel(zt, zt, s, l);
    let kuf = cross_kernel(zt, xt, s, l);
    let mu = tape.constant(q.mean.clone());
    let ls: Vec<Var<'_>> = q.factors.iter().map(|f| tape.constant(f.as_dense().clone())).collect();
    let t = svgp_terms(kuu, kuf, s, mu, &ls, &JitterLadder::default())?;
    if t.min_raw_distributional <= -NEGATIVE_VARIANCE_TOLERANCE {
        return Err(Error::NumericalIntegrity(format!(
            "predicted variance {} below −{NEGATIVE_VARIANCE_TOLERANCE:e}",
            t.min_raw_distributional
        )));
    }
    Ok(PlainTerms {
        mean: t.mean.value(),
        distributional: t.distributional.value(),
        within: t.within.value(),
        variance: t.variance.value(),
        kl: t.kl.scalar_value(),
        clamped: t.clamped,
    })
}

/// Predictive moments for N inputs and C outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMoments {
    /// N×C.
    pub mean: DenseMatrix,
    /// N×C, nonnegative.
    pub variance: DenseMatrix,
    /// Entries in (−1e−10, 0) that were set to zero.
    pub clamped: usize,
}

/// `μ = K_fu K⁻¹ m`, `Σ̃ = K_ff − K_fu K⁻¹ (K − S) K⁻¹ K_uf` (diagonal).
pub fn predict_moments(
    x: &SvgpInputs,
    z: &InducingSet,
    q: &VariationalPosterior,
    p: &KernelParams,
) -> Result<PredictiveMoments> {
    let t = plain_terms(x, z, q, p)?;
    Ok(PredictiveMoments { mean: t.mean, variance: t.variance, clamped: t.clamped })
}

/// `Σ_c KL[N(m_c, S_c) ‖ N(0, K_uu)]`.
pub fn kl_qu_pu(q: &VariationalPosterior, z: &InducingSet, p: &KernelParams) -> Result<f64> {
    if q.count() != z.count() || z.dim() != p.dim() {
        return Err(Error::dims("posterior, inducing set and kernel disagree"));
    }
    let tape = Tape::new();
    let zt = place_inducing(&tape, z);
    let (s, l) = kernel_vars(&tape, p);
    let kuu = cross_kernel(zt, zt, s, l);
    let lk = kuu.cholesky(&JitterLadder::default())?;
    let c = q.outputs();
    let mut kl = lk.diag().ln().sum().scale(2.0 * c as f64).scalar_value() - (q.count() * c) as f64;
    kl += lk.solve_lower(tape.constant(q.mean.clone())).square().sum().scalar_value();
    for f in &q.factors {
        let lf = tape.constant(f.as_dense().clone());
        kl += lk.solve_lower(lf).square().sum().scalar_value();
        kl -= 2.0 * f.as_dense().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Ok(0.5 * kl)
}

/// Uncollapsed SVGP bound for regression targets `y` (N×C). Only the
/// expected log-likelihood is scaled by `dataset_size / N`.
pub fn elbo_svgp(
    x: &SvgpInputs,
    y: &DenseMatrix,
    z: &InducingSet,
    q: &VariationalPosterior,
    p: &KernelParams,
    noise: NoiseModel,
    dataset_size: usize,
) -> Result<f64> {
    NoiseModel::new(noise.noise_variance)?;
    if y.rows() != x.len() || y.cols() != q.outputs() {
        return Err(Error::dims(format!(
            "targets {:?} for {} inputs and {} outputs",
            y.shape(),
            x.len(),
            q.outputs()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyData);
    }
    let t = plain_terms(x, z, q, p)?;
    let tape = Tape::new();
    let ell = gaussian_expected_loglik(
        tape.constant(y.clone()),
        tape.constant(t.mean),
        tape.constant(t.variance),
        tape.scalar(noise.noise_variance),
    )
    .scalar_value();
    let bound = ell * dataset_size as f64 / x.len() as f64 - t.kl;
    if !bound.is_finite() {
        return Err(Error::NonFiniteLoss(bound));
    }
    Ok(bound)
}

/// Distributional and within-data parts of the predictive variance.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySplit {
    /// N entries of `diag(K_ff − K_fu K⁻¹ K_uf)`.
    pub distributional: Vec<f64>,
    /// N×C entries of `diag(K_fu K⁻¹ S_c K⁻¹ K_uf)`.
    pub within_data: DenseMatrix,
}

pub fn decompose_uncertainty(
    x: &SvgpInputs,
    z: &InducingSet,
    q: &VariationalPosterior,
    p: &KernelParams,
) -> Result<UncertaintySplit> {
    let t = plain_terms(x, z, q, p)?;
    Ok(UncertaintySplit { distributional: t.distributional.into_vec(), within_data: t.within })
}

/// Elementwise `½ ln(2π v) + ½` with `v` floored at 1e−12.
pub fn distributional_differential_entropy(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&v| 0.5 * (2.0 * std::f64::consts::PI * v.max(ENTROPY_VARIANCE_FLOOR)).ln() + 0.5)
        .collect()
}

/// Pieces of the collapsed bound, all on the tape.
pub struct CollapsedTerms<'t> {
    pub bound: Var<'t>,
    /// `½ yᵀ(Q_ff + σ²I)⁻¹y`.
    pub data_fit: Var<'t>,
    /// `Tr[K_ff − Q_ff] / (2σ²)`.
    pub trace_term: Var<'t>,
    pub(crate) lk: Var<'t>,
    pub(crate) lb: Var<'t>,
    pub(crate) c: Var<'t>,
}

/// Collapsed bound `log N(y | 0, Q_ff + σ²I) − Tr[K_ff − Q_ff]/(2σ²)`
/// through `B = I + AAᵀ`, `A = L⁻¹K_uf/σ`. `y` is N×1.
pub fn collapsed_terms<'t>(
    kuu: Var<'t>,
    kuf: Var<'t>,
    y: Var<'t>,
    prior_var: Var<'t>,
    noise_var: Var<'t>,
    ladder: &JitterLadder,
) -> Result<CollapsedTerms<'t>> {
    let tape = kuu.tape();
    let n = kuf.cols() as f64;
    let m = kuu.rows();
    let sigma = noise_var.sqrt();
    let lk = kuu.cholesky(ladder)?;
    let a = lk.solve_lower(kuf) / sigma;
    let aat = a.matmul_nt(a);
    let bmat = aat + tape.constant(DenseMatrix::identity(m));
    let lb = bmat.cholesky(ladder)?;
    let c = lb.solve_lower(a.matmul(y)) / sigma;
    let yy = y.square().sum();
    let data_fit = (yy / noise_var - c.square().sum()).scale(0.5);
    let trace_term = (prior_var.scale(n) / noise_var - aat.diag().sum()).scale(0.5);
    let log_det = lb.diag().ln().sum() + noise_var.ln().sum().scale(0.5 * n);
    let bound = -(log_det + data_fit + trace_term) - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(CollapsedTerms { bound, data_fit, trace_term, lk, lb, c })
}

/// Result of [`collapsed_sgpr`].
#[derive(Clone, Debug)]
pub struct CollapsedSgpr {
    pub bound: f64,
    pub data_fit: f64,
    pub trace_term: f64,
    pub posterior: VariationalPosterior,
}

/// Titsias' collapsed bound with its optimal `q(U)`:
/// `m = σ⁻² K_uu (K_uu + σ⁻²K_uf K_fu)⁻¹ K_uf y`,
/// `S = K_uu (K_uu + σ⁻²K_uf K_fu)⁻¹ K_uu`.
pub fn collapsed_sgpr(
    x: &DenseMatrix,
    y: &[f64],
    z: &DenseMatrix,
    p: &KernelParams,
    noise: NoiseModel,
) -> Result<CollapsedSgpr> {
    NoiseModel::new(noise.noise_variance)?;
    if x.rows() != y.len() {
        return Err(Error::dims("one target per input row"));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyData);
    }
    let zs = InducingSet::euclidean(z.clone())?;
    check_compat(&SvgpInputs::Points(x.clone()), &zs, p)?;
    let tape = Tape::new();
    let (s, l) = kernel_vars(&tape, p);
    let xt = tape.constant(x.clone());
    let zt = tape.constant(z.clone());
    let kuu = se_ard_var(zt, zt, s, l);
    let kuf = se_ard_var(zt, xt, s, l);
    let t = collapsed_terms(
        kuu,
        kuf,
        tape.constant(DenseMatrix::column(y)),
        s,
        tape.scalar(noise.noise_variance),
        &JitterLadder::default(),
    )?;
    // S = L_K L_B⁻ᵀ L_B⁻¹ L_Kᵀ and m = L_K L_B⁻ᵀ c
    let w = t.lb.solve_lower(t.lk.t()).t();
    let lk = t.lk.value();
    let mean = lk.matmul(&t.lb.solve_lower_t(t.c).value())?;
    let cov = w.matmul_nt(w).value();
    let cov = cov.zip_map(&cov.transpose(), |a, b| 0.5 * (a + b));
    let factor = cholesky_jitter(&cov, &JitterLadder::default())?.lower;
    let bound = t.bound.scalar_value();
    if !bound.is_finite() {
        return Err(Error::NonFiniteLoss(bound));
    }
    Ok(CollapsedSgpr {
        bound,
        data_fit: t.data_fit.scalar_value(),
        trace_term: t.trace_term.scalar_value(),
        posterior: VariationalPosterior::new(mean, vec![factor])?,
    })
}
