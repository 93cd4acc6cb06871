//! Per-layer states and the tape building blocks shared by the network
//! forward pass and the standalone layer operations.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::numerics::{DenseMatrix, JitterLadder};
use crate::svgp::{cross_kernel, svgp_terms, InducingSet, SvgpTerms, TapeInputs, VariationalPosterior};

use super::spec::{conv_output_size, MapShape, MeanFunction};

/// First two moments of every cell of a batch of maps. Rows are ordered
/// (example, row, column); columns are channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: DenseMatrix,
    pub variance: DenseMatrix,
}

impl MomentMap {
    pub fn new(batch: usize, shape: MapShape, mean: DenseMatrix, variance: DenseMatrix) -> Result<Self> {
        let rows = batch * shape.positions();
        if mean.shape() != (rows, shape.channels) || variance.shape() != mean.shape() {
            return Err(Error::dims(format!(
                "moment map {batch}x{}x{}x{} got mean {:?}, variance {:?}",
                shape.height,
                shape.width,
                shape.channels,
                mean.shape(),
                variance.shape()
            )));
        }
        if variance.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NumericalIntegrity("negative variance in moment map".into()));
        }
        Ok(Self { batch, height: shape.height, width: shape.width, channels: shape.channels, mean, variance })
    }

    pub fn shape(&self) -> MapShape {
        MapShape::new(self.height, self.width, self.channels)
    }

    /// `(mean, variance)` at one cell.
    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> (f64, f64) {
        let r = (b * self.height + h) * self.width + w;
        (self.mean.get(r, c), self.variance.get(r, c))
    }
}

/// Convolved SVGP: one SE-kernel SVGP applied to every patch.
#[derive(Clone, Debug)]
pub struct ConvSvgpLayer {
    pub kernel_size: usize,
    pub stride: usize,
    /// M×(k·k·C) inducing patches, features ordered (row, column, channel).
    pub inducing: DenseMatrix,
    pub kernel: KernelParams,
    pub posterior: VariationalPosterior,
    pub mean_function: MeanFunction,
    pub jitter: f64,
}

/// Affine convolution acting on moment maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineOperator {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k·k·C_in)×C_out; row order (row, column, input channel).
    pub weights: DenseMatrix,
    pub stride: usize,
    pub dilation: usize,
    pub lipschitz_normalized: bool,
}

impl AffineOperator {
    pub fn new(kernel_size: usize, in_channels: usize, weights: DenseMatrix) -> Result<Self> {
        if weights.rows() != kernel_size * kernel_size * in_channels {
            return Err(Error::dims(format!(
                "affine weights have {} rows, kernel {kernel_size} with {in_channels} channels needs {}",
                weights.rows(),
                kernel_size * kernel_size * in_channels
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NumericalIntegrity("non-finite affine weights".into()));
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels: weights.cols(),
            weights,
            stride: 1,
            dilation: 1,
            lipschitz_normalized: false,
        })
    }

    /// Fan-in of every output column.
    pub fn column_len(&self) -> usize {
        self.weights.rows()
    }
}

/// Elementwise W2-kernel SVGP over moment vectors.
#[derive(Clone, Debug)]
pub struct DistGpLayer {
    /// Distributional inducing set of dimension C_pre.
    pub inducing: InducingSet,
    pub kernel: KernelParams,
    pub posterior: VariationalPosterior,
    pub mean_function: MeanFunction,
    pub jitter: f64,
}

/// Fixed matrix realising a mean function, or `None` for zero mean.
pub fn mean_projection(f: MeanFunction, d_in: usize, d_out: usize) -> Option<DenseMatrix> {
    match f {
        MeanFunction::Zero => None,
        MeanFunction::Average => Some(DenseMatrix::filled(d_in, d_out, 1.0 / d_in as f64)),
        MeanFunction::Identity => Some(DenseMatrix::from_fn(d_in, d_out, |i, j| if i == j { 1.0 } else { 0.0 })),
    }
}

/// Flat gather indices extracting `k×k` patches from a batch of maps
/// stored as (B·H·W)×C. Returns the indices and the output spatial size.
pub fn patch_indices(
    batch: usize,
    s: MapShape,
    k: usize,
    stride: usize,
    dilation: usize,
) -> Result<(Rc<Vec<usize>>, usize, usize)> {
    let (ho, wo) = match (
        conv_output_size(s.height, k, stride, dilation),
        conv_output_size(s.width, k, stride, dilation),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::dims(format!(
                "kernel {k} (stride {stride}, dilation {dilation}) does not fit {}x{}",
                s.height, s.width
            )))
        }
    };
    let c = s.channels;
    let mut idx = Vec::with_capacity(batch * ho * wo * k * k * c);
    for b in 0..batch {
        for oh in 0..ho {
            for ow in 0..wo {
                for di in 0..k {
                    for dj in 0..k {
                        let row = (b * s.height + oh * stride + di * dilation) * s.width + ow * stride + dj * dilation;
                        idx.extend((0..c).map(|ch| row * c + ch));
                    }
                }
            }
        }
    }
    Ok((Rc::new(idx), ho, wo))
}

/// Gathers patches of a (B·H·W)×C map into (B·Ho·Wo)×(k·k·C).
pub fn extract_patches<'t>(
    x: Var<'t>,
    batch: usize,
    s: MapShape,
    k: usize,
    stride: usize,
    dilation: usize,
) -> Result<(Var<'t>, MapShape)> {
    if x.shape() != (batch * s.positions(), s.channels) {
        return Err(Error::dims(format!("map of shape {:?} for {batch} examples of {s:?}", x.shape())));
    }
    if k == 1 && stride == 1 {
        return Ok((x, s));
    }
    let (idx, ho, wo) = patch_indices(batch, s, k, stride, dilation)?;
    let cols = k * k * s.channels;
    Ok((x.gather(idx, batch * ho * wo, cols), MapShape::new(ho, wo, cols)))
}

/// Tape handles for one SVGP layer.
#[derive(Clone, Copy)]
pub struct GpVars<'t> {
    pub inducing: TapeInputs<'t>,
    pub variance: Var<'t>,
    pub lengthscales: Var<'t>,
    pub m_u: Var<'t>,
}

/// SVGP terms plus the mean-function contribution. `mean_in` is the
/// input mean (points or moment means) the mean function acts on.
pub fn gp_block<'t>(
    inputs: TapeInputs<'t>,
    gp: GpVars<'t>,
    l_s: &[Var<'t>],
    mean_in: Var<'t>,
    mean_fn: Option<&DenseMatrix>,
    jitter: f64,
    ladder: &JitterLadder,
) -> Result<(SvgpTerms<'t>, Var<'t>)> {
    let tape = gp.m_u.tape();
    let m = gp.m_u.rows();
    let mut kuu = cross_kernel(gp.inducing, gp.inducing, gp.variance, gp.lengthscales);
    if jitter > 0.0 {
        let mut eye = DenseMatrix::identity(m);
        eye = eye.scale(jitter);
        kuu = kuu + tape.constant(eye);
    }
    let kuf = cross_kernel(gp.inducing, inputs, gp.variance, gp.lengthscales);
    let terms = svgp_terms(kuu, kuf, gp.variance, gp.m_u, l_s, ladder)?;
    let mean = match mean_fn {
        Some(p) => terms.mean + mean_in.matmul(tape.constant(p.clone())),
        None => terms.mean,
    };
    Ok((terms, mean))
}

/// Moment convolution: mean with `A`, variance with `A⊙A`.
pub fn affine_block<'t>(
    mean: Var<'t>,
    var: Var<'t>,
    batch: usize,
    s: MapShape,
    weights: Var<'t>,
    k: usize,
    stride: usize,
    dilation: usize,
) -> Result<(Var<'t>, Var<'t>, MapShape)> {
    let (pm, out) = extract_patches(mean, batch, s, k, stride, dilation)?;
    let (pv, _) = extract_patches(var, batch, s, k, stride, dilation)?;
    if weights.rows() != out.channels {
        return Err(Error::dims(format!(
            "affine weights have {} rows, patches have {} features",
            weights.rows(),
            out.channels
        )));
    }
    let shape = MapShape::new(out.height, out.width, weights.cols());
    Ok((pm.matmul(weights), pv.matmul(weights.square()), shape))
}

/// Barycentric pooling over non-overlapping windows.
pub fn pool_block<'t>(
    mean: Var<'t>,
    var: Var<'t>,
    batch: usize,
    s: MapShape,
    window: usize,
    theta: &[f64],
) -> Result<(Var<'t>, Var<'t>, MapShape)> {
    if !s.height.is_multiple_of(window) || !s.width.is_multiple_of(window) {
        return Err(Error::dims(format!("pool window {window} does not divide {}x{}", s.height, s.width)));
    }
    if theta.len() != window * window {
        return Err(Error::dims(format!("{} pool weights for window {window}", theta.len())));
    }
    let c = s.channels;
    let out = MapShape::new(s.height / window, s.width / window, c);
    if window == 1 {
        return Ok((mean, var, out));
    }
    let (pm, _) = extract_patches(mean, batch, s, window, window, 1)?;
    let (pv, _) = extract_patches(var, batch, s, window, window, 1)?;
    let w = DenseMatrix::from_fn(window * window * c, c, |r, j| if r % c == j { theta[r / c] } else { 0.0 });
    let w = mean.tape().constant(w);
    let m = pm.matmul(w);
    let sd = pv.sqrt().matmul(w);
    Ok((m, sd.square(), out))
}

pub(crate) fn lower_from_raw(raw: &DenseMatrix) -> DenseMatrix {
    let tape = Tape::new();
    tape.constant(raw.clone()).lower_factor().value()
}

pub(crate) fn raw_from_lower(l: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(l.rows(), l.cols(), |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => crate::gradients::softplus_inverse(l.get(i, j)),
        std::cmp::Ordering::Greater => l.get(i, j),
        std::cmp::Ordering::Less => 0.0,
    })
}

fn place_gp<'t>(
    tape: &'t Tape,
    inducing: &InducingSet,
    kernel: &KernelParams,
    q: &VariationalPosterior,
) -> (GpVars<'t>, Vec<Var<'t>>) {
    let inducing = match inducing {
        InducingSet::Euclidean(z) => TapeInputs::Points(tape.constant(z.clone())),
        InducingSet::Distributional { mean, variance } => {
            TapeInputs::Moments(tape.constant(mean.clone()), tape.constant(variance.clone()))
        }
    };
    let vars = GpVars {
        inducing,
        variance: tape.constant(DenseMatrix::scalar(kernel.variance)),
        lengthscales: tape.constant(DenseMatrix::row_vector(&kernel.lengthscales)),
        m_u: tape.constant(q.mean.clone()),
    };
    let ls = q.factors.iter().map(|f| tape.constant(f.as_dense().clone())).collect();
    (vars, ls)
}

fn check_gp(count: usize, dim: usize, kernel: &KernelParams, q: &VariationalPosterior) -> Result<()> {
    if kernel.dim() != dim || q.count() != count {
        return Err(Error::dims(format!(
            "inducing set {count}x{dim}, kernel dim {}, posterior size {}",
            kernel.dim(),
            q.count()
        )));
    }
    Ok(())
}

fn reject_negative(t: &SvgpTerms<'_>) -> Result<()> {
    if t.min_raw_distributional <= -crate::svgp::NEGATIVE_VARIANCE_TOLERANCE {
        return Err(Error::NumericalIntegrity(format!(
            "predicted variance {} below −{:e}",
            t.min_raw_distributional,
            crate::svgp::NEGATIVE_VARIANCE_TOLERANCE
        )));
    }
    Ok(())
}

/// Per-patch SVGP predictive moments for a batch of images given as
/// N×(H·W·C) rows.
pub fn conv_svgp_forward(images: &DenseMatrix, shape: MapShape, layer: &ConvSvgpLayer) -> Result<MomentMap> {
    if images.cols() != shape.volume() {
        return Err(Error::dims(format!("images have {} values, shape {shape:?}", images.cols())));
    }
    let k = layer.kernel_size;
    let z = InducingSet::euclidean(layer.inducing.clone())?;
    check_gp(z.count(), z.dim(), &layer.kernel, &layer.posterior)?;
    if z.dim() != k * k * shape.channels {
        return Err(Error::dims(format!("inducing patches have dim {}, need {}", z.dim(), k * k * shape.channels)));
    }
    let batch = images.rows();
    let tape = Tape::new();
    let x = tape.constant(images.clone().reshape(batch * shape.positions(), shape.channels)?);
    let (patches, ps) = extract_patches(x, batch, shape, k, layer.stride, 1)?;
    let (gp, ls) = place_gp(&tape, &z, &layer.kernel, &layer.posterior);
    let c_out = layer.posterior.outputs();
    let proj = mean_projection(layer.mean_function, ps.channels, c_out);
    let (terms, mean) = gp_block(
        TapeInputs::Points(patches),
        gp,
        &ls,
        patches,
        proj.as_ref(),
        layer.jitter,
        &JitterLadder::default(),
    )?;
    reject_negative(&terms)?;
    MomentMap::new(batch, MapShape::new(ps.height, ps.width, c_out), mean.value(), terms.variance.value())
}

/// Mean convolved with `A`, variance convolved with `A⊙A`.
pub fn affine_moment_conv(f: &MomentMap, a: &AffineOperator) -> Result<MomentMap> {
    if f.channels != a.in_channels {
        return Err(Error::dims(format!("map has {} channels, operator expects {}", f.channels, a.in_channels)));
    }
    let tape = Tape::new();
    let (m, v, s) = affine_block(
        tape.constant(f.mean.clone()),
        tape.constant(f.variance.clone()),
        f.batch,
        f.shape(),
        tape.constant(a.weights.clone()),
        a.kernel_size,
        a.stride,
        a.dilation,
    )?;
    MomentMap::new(f.batch, s, m.value(), v.value())
}

/// Rescales every output column to `A_col / (√C ‖A_col‖)`, `C` the fan-in.
pub fn normalize_affine(a: &AffineOperator) -> Result<AffineOperator> {
    let mut out = a.clone();
    out.weights = normalize_columns(&a.weights)?;
    out.lipschitz_normalized = true;
    Ok(out)
}

pub(crate) fn normalize_columns(w: &DenseMatrix) -> Result<DenseMatrix> {
    let c = w.rows() as f64;
    let mut out = w.clone();
    for j in 0..w.cols() {
        let norm = w.col(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateWeights { column: j, norm });
        }
        let s = 1.0 / (c.sqrt() * norm);
        for i in 0..w.rows() {
            out.set(i, j, w.get(i, j) * s);
        }
    }
    Ok(out)
}

/// W2-kernel SVGP applied independently at every cell.
pub fn distgp_activation(f: &MomentMap, layer: &DistGpLayer) -> Result<MomentMap> {
    check_gp(layer.inducing.count(), layer.inducing.dim(), &layer.kernel, &layer.posterior)?;
    if !matches!(layer.inducing, InducingSet::Distributional { .. }) {
        return Err(Error::InvalidSpec("activation needs a distributional inducing set".into()));
    }
    if layer.inducing.dim() != f.channels {
        return Err(Error::dims(format!(
            "inducing dimension {} but map has {} channels",
            layer.inducing.dim(),
            f.channels
        )));
    }
    let tape = Tape::new();
    let m = tape.constant(f.mean.clone());
    let v = tape.constant(f.variance.clone());
    let (gp, ls) = place_gp(&tape, &layer.inducing, &layer.kernel, &layer.posterior);
    let c_out = layer.posterior.outputs();
    let proj = mean_projection(layer.mean_function, f.channels, c_out);
    let (terms, mean) = gp_block(
        TapeInputs::Moments(m, v),
        gp,
        &ls,
        m,
        proj.as_ref(),
        layer.jitter,
        &JitterLadder::default(),
    )?;
    reject_negative(&terms)?;
    MomentMap::new(f.batch, MapShape::new(f.height, f.width, c_out), mean.value(), terms.variance.value())
}

/// Closed-form W2 barycentre of each `window×window` block: mean
/// `Σθm`, variance `(Σθ√v)²`.
pub fn barycentre_pool(f: &MomentMap, window: usize, theta: Option<&[f64]>) -> Result<MomentMap> {
    if window == 0 {
        return Err(Error::dims("pool window must be positive"));
    }
    let uniform;
    let theta = match theta {
        Some(t) => t,
        None => {
            uniform = vec![1.0 / (window * window) as f64; window * window];
            &uniform
        }
    };
    if theta.iter().any(|&t| !(t >= 0.0)) || (theta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution("pool weights must be nonnegative and sum to 1".into()));
    }
    let tape = Tape::new();
    let (m, v, s) = pool_block(
        tape.constant(f.mean.clone()),
        tape.constant(f.variance.clone()),
        f.batch,
        f.shape(),
        window,
        theta,
    )?;
    MomentMap::new(f.batch, s, m.value(), v.value())
}
