use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradients::{softplus_forward, Bound, Constraint, ParamId, ParameterStore};
use crate::kernels::KernelParams;
use crate::numerics::{cholesky_jitter, DenseMatrix, JitterLadder, LowerTriangular};
use crate::svgp::{InducingSet, TapeInputs, VariationalPosterior, NEGATIVE_VARIANCE_TOLERANCE};

use super::layers::{
    affine_block, extract_patches, gp_block, lower_from_raw, mean_projection, normalize_columns, pool_block,
    raw_from_lower, AffineOperator, ConvSvgpLayer, DistGpLayer, GpVars, MomentMap,
};
use super::spec::{pool_weights, LayerSpec, MapShape, MeanFunction, NetworkSpec};

/// Raw value of the distributional inducing variances at construction.
pub const INDUCING_VARIANCE_RAW_INIT: f64 = -2.0;

/// Default jitter added to every `K_uu` before factorisation.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Parameter handles of one GP layer.
#[derive(Clone, Debug)]
pub struct GpParams {
    pub z: ParamId,
    /// Present for distributional inducing sets.
    pub z_var: Option<ParamId>,
    pub variance: ParamId,
    pub lengthscales: ParamId,
    pub m_u: ParamId,
    /// Raw square matrices mapped through `lower_factor`.
    pub l_s: Vec<ParamId>,
    /// Input width of the kernel.
    pub dim: usize,
    pub mean_projection: Option<DenseMatrix>,
}

#[derive(Clone, Debug)]
pub enum LayerParams {
    Svgp(GpParams),
    Affine { weights: ParamId },
    DistGp(GpParams),
    Pool { theta: Vec<f64> },
}

/// Standalone state of one layer, read out of the parameter store.
#[derive(Clone, Debug)]
pub enum LayerState {
    ConvSvgp(ConvSvgpLayer),
    Affine(AffineOperator),
    DistGp(DistGpLayer),
    Pool { window: usize, theta: Vec<f64> },
}

/// A layer's output on the tape.
#[derive(Clone, Copy)]
pub struct LayerTrace<'t> {
    pub shape: MapShape,
    pub mean: Var<'t>,
    pub variance: Var<'t>,
    pub gp: Option<GpTrace<'t>>,
}

#[derive(Clone, Copy)]
pub struct GpTrace<'t> {
    /// Rows×1 `K_ff − Q_ff`.
    pub distributional: Var<'t>,
    /// Rows×C within-data variance.
    pub within: Var<'t>,
    pub kl: Var<'t>,
    pub min_raw_distributional: f64,
}

pub struct TapeForward<'t> {
    pub batch: usize,
    pub layers: Vec<LayerTrace<'t>>,
    /// Sum of all layer KL terms.
    pub kl: Var<'t>,
}

impl<'t> TapeForward<'t> {
    pub fn output(&self) -> &LayerTrace<'t> {
        self.layers.last().expect("nonempty network")
    }

    /// Decomposition of the last GP layer.
    pub fn last_gp(&self) -> &GpTrace<'t> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| l.gp.as_ref())
            .expect("first layer is a GP")
    }
}

/// Plain-value network output.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub shape: MapShape,
    pub mean: DenseMatrix,
    pub variance: DenseMatrix,
    /// Rows×1 distributional variance of the last GP layer.
    pub distributional: DenseMatrix,
    /// Rows×C within-data variance of the last GP layer.
    pub within: DenseMatrix,
}

/// A network: its spec plus every parameter in one store.
#[derive(Clone, Debug)]
pub struct DistGpNet {
    spec: NetworkSpec,
    shapes: Vec<MapShape>,
    params: ParameterStore,
    layers: Vec<LayerParams>,
    pub jitter: f64,
    pub ladder: JitterLadder,
}

fn gp_prefix(i: usize) -> String {
    format!("l{i}")
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

impl DistGpNet {
    /// Builds a network with data-independent starting values: Gaussian
    /// inducing locations, unit kernels, `m_U = 0`, `L_S = 0.1·chol(K_uu)`
    /// and `N(0, 1/fan_in)` affine weights.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = if i == 0 { spec.input } else { shapes[i - 1] };
            let p = gp_prefix(i);
            let lp = match layer {
                LayerSpec::ConvSvgp(c) => {
                    let d = c.kernel_size * c.kernel_size * input.channels;
                    let gp = Self::add_gp(
                        &mut params,
                        &mut rng,
                        &p,
                        (c.inducing, d, c.channels_out),
                        false,
                        c.kernel,
                        c.mean_function,
                    )?;
                    LayerParams::Svgp(gp)
                }
                LayerSpec::DenseSvgp(c) => {
                    let d = input.volume();
                    let gp = Self::add_gp(
                        &mut params,
                        &mut rng,
                        &p,
                        (c.inducing, d, c.outputs),
                        false,
                        c.kernel,
                        c.mean_function,
                    )?;
                    LayerParams::Svgp(gp)
                }
                LayerSpec::DistGpActivation(c) => {
                    let gp = Self::add_gp(
                        &mut params,
                        &mut rng,
                        &p,
                        (c.inducing, input.channels, c.channels_out),
                        true,
                        c.kernel,
                        c.mean_function,
                    )?;
                    LayerParams::DistGp(gp)
                }
                LayerSpec::DenseDistGp(c) => {
                    let gp = Self::add_gp(
                        &mut params,
                        &mut rng,
                        &p,
                        (c.inducing, input.volume(), c.channels_out),
                        true,
                        c.kernel,
                        c.mean_function,
                    )?;
                    LayerParams::DistGp(gp)
                }
                LayerSpec::AffineConv(a) => {
                    let fan_in = a.kernel_size * a.kernel_size * input.channels;
                    let mut w = randn(&mut rng, fan_in, a.channels_out, 1.0 / (fan_in as f64).sqrt());
                    if a.lipschitz_normalized {
                        w = normalize_columns(&w)?;
                    }
                    let weights = params.add(format!("{p}.weights"), "affine", w, Constraint::Unconstrained)?;
                    LayerParams::Affine { weights }
                }
                LayerSpec::BarycentrePool(s) => LayerParams::Pool { theta: pool_weights(s)? },
            };
            layers.push(lp);
        }
        let mut net = Self { spec, shapes, params, layers, jitter: DEFAULT_JITTER, ladder: JitterLadder::default() };
        for i in 0..net.layers.len() {
            if net.gp_params(i).is_some() {
                net.reset_variational(i)?;
            }
        }
        Ok(net)
    }

    fn add_gp(
        params: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        p: &str,
        (m, d, c): (usize, usize, usize),
        distributional: bool,
        k: super::spec::KernelInit,
        mean_fn: MeanFunction,
    ) -> Result<GpParams> {
        let (z, z_var) = if distributional {
            let z = params.add(format!("{p}.z_mean"), "inducing", randn(rng, m, d, 1.0), Constraint::Unconstrained)?;
            let v = DenseMatrix::filled(m, d, softplus_forward(INDUCING_VARIANCE_RAW_INIT));
            let zv = params.add(format!("{p}.z_var"), "inducing", v, Constraint::Positive)?;
            (z, Some(zv))
        } else {
            (params.add(format!("{p}.z"), "inducing", randn(rng, m, d, 1.0), Constraint::Unconstrained)?, None)
        };
        let variance = params.add(
            format!("{p}.variance"),
            "kernel",
            DenseMatrix::scalar(k.variance.unwrap_or(1.0)),
            Constraint::Positive,
        )?;
        let lengthscales = params.add(
            format!("{p}.lengthscales"),
            "kernel",
            DenseMatrix::filled(1, d, k.lengthscale.unwrap_or(1.0)),
            Constraint::Positive,
        )?;
        let m_u = params.add(format!("{p}.m_u"), "variational", DenseMatrix::zeros(m, c), Constraint::Unconstrained)?;
        let mut l_s = Vec::with_capacity(c);
        for j in 0..c {
            l_s.push(params.add(
                format!("{p}.l_s{j}"),
                "variational",
                raw_from_lower(&DenseMatrix::identity(m)),
                Constraint::Unconstrained,
            )?);
        }
        Ok(GpParams { z, z_var, variance, lengthscales, m_u, l_s, dim: d, mean_projection: mean_projection(mean_fn, d, c) })
    }

    /// Reassembles a network from a spec and a parameter store whose leading
    /// entries follow the layout produced by [`DistGpNet::new`]. Extra
    /// entries (likelihood parameters, say) may follow.
    pub fn from_parts(spec: NetworkSpec, params: ParameterStore, jitter: f64) -> Result<Self> {
        let template = Self::new(spec, 0)?;
        if params.len() < template.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected at least {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for id in template.params.ids() {
            let name = template.params.name(id);
            let other = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if other != id || params.raw(other).shape() != template.params.raw(id).shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has wrong position or shape")));
            }
        }
        Ok(Self { params, jitter, ..template })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[MapShape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> MapShape {
        *self.shapes.last().expect("nonempty")
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn gp_params(&self, i: usize) -> Option<&GpParams> {
        match &self.layers[i] {
            LayerParams::Svgp(g) | LayerParams::DistGp(g) => Some(g),
            _ => None,
        }
    }

    /// Indices of GP layers in order.
    pub fn gp_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.gp_params(i).is_some()).collect()
    }

    /// Current kernel hyperparameters of GP layer `i`.
    pub fn kernel(&self, i: usize) -> Result<KernelParams> {
        let g = self.gp_params(i).ok_or_else(|| Error::InvalidSpec(format!("layer {i} is not a GP")))?;
        KernelParams::new(self.params.value(g.variance).get(0, 0), self.params.value(g.lengthscales).row(0).to_vec())
    }

    pub fn inducing(&self, i: usize) -> Result<InducingSet> {
        let g = self.gp_params(i).ok_or_else(|| Error::InvalidSpec(format!("layer {i} is not a GP")))?;
        match g.z_var {
            Some(v) => InducingSet::distributional(self.params.value(g.z), self.params.value(v)),
            None => InducingSet::euclidean(self.params.value(g.z)),
        }
    }

    pub fn posterior(&self, i: usize) -> Result<VariationalPosterior> {
        let g = self.gp_params(i).ok_or_else(|| Error::InvalidSpec(format!("layer {i} is not a GP")))?;
        let factors = g
            .l_s
            .iter()
            .map(|&id| LowerTriangular::new(lower_from_raw(self.params.raw(id))))
            .collect::<Result<Vec<_>>>()?;
        VariationalPosterior::new(self.params.value(g.m_u), factors)
    }

    /// `K_uu` of GP layer `i` including the network jitter.
    pub fn kuu(&self, i: usize) -> Result<DenseMatrix> {
        let z = self.inducing(i)?;
        let p = self.kernel(i)?;
        let tape = Tape::new();
        let zt = match &z {
            InducingSet::Euclidean(x) => TapeInputs::Points(tape.constant(x.clone())),
            InducingSet::Distributional { mean, variance } => {
                TapeInputs::Moments(tape.constant(mean.clone()), tape.constant(variance.clone()))
            }
        };
        let k = crate::svgp::cross_kernel(
            zt,
            zt,
            tape.constant(DenseMatrix::scalar(p.variance)),
            tape.constant(DenseMatrix::row_vector(&p.lengthscales)),
        );
        let mut k = k.value();
        k.add_diagonal(self.jitter);
        Ok(k)
    }

    /// Resets `q(U)` of GP layer `i` to `m_U = 0`, `L_S = 0.1·chol(K_uu)`.
    pub fn reset_variational(&mut self, i: usize) -> Result<()> {
        let g = self.gp_params(i).cloned().ok_or_else(|| Error::InvalidSpec(format!("layer {i} is not a GP")))?;
        let k = self.kuu(i)?;
        let l = cholesky_jitter(&k, &self.ladder)?.lower.into_dense().scale(0.1);
        let m = self.params.raw(g.m_u).shape();
        self.params.set_value(g.m_u, DenseMatrix::zeros(m.0, m.1))?;
        let raw = raw_from_lower(&l);
        for &id in &g.l_s {
            self.params.set_value(id, raw.clone())?;
        }
        Ok(())
    }

    /// Standalone state of layer `i`.
    pub fn layer_state(&self, i: usize) -> Result<LayerState> {
        let input = if i == 0 { self.spec.input } else { self.shapes[i - 1] };
        Ok(match (&self.spec.layers[i], &self.layers[i]) {
            (LayerSpec::ConvSvgp(c), LayerParams::Svgp(g)) => LayerState::ConvSvgp(ConvSvgpLayer {
                kernel_size: c.kernel_size,
                stride: c.stride,
                inducing: self.params.value(g.z),
                kernel: self.kernel(i)?,
                posterior: self.posterior(i)?,
                mean_function: c.mean_function,
                jitter: self.jitter,
            }),
            (LayerSpec::DenseSvgp(c), LayerParams::Svgp(g)) => LayerState::ConvSvgp(ConvSvgpLayer {
                kernel_size: 1,
                stride: 1,
                inducing: self.params.value(g.z),
                kernel: self.kernel(i)?,
                posterior: self.posterior(i)?,
                mean_function: c.mean_function,
                jitter: self.jitter,
            }),
            (LayerSpec::DistGpActivation(c) | LayerSpec::DenseDistGp(c), LayerParams::DistGp(_)) => {
                LayerState::DistGp(DistGpLayer {
                    inducing: self.inducing(i)?,
                    kernel: self.kernel(i)?,
                    posterior: self.posterior(i)?,
                    mean_function: c.mean_function,
                    jitter: self.jitter,
                })
            }
            (LayerSpec::AffineConv(a), LayerParams::Affine { weights }) => LayerState::Affine(AffineOperator {
                kernel_size: a.kernel_size,
                in_channels: input.channels,
                out_channels: a.channels_out,
                weights: self.params.value(*weights),
                stride: a.stride,
                dilation: a.dilation,
                lipschitz_normalized: a.lipschitz_normalized,
            }),
            (LayerSpec::BarycentrePool(p), LayerParams::Pool { theta }) => {
                LayerState::Pool { window: p.window, theta: theta.clone() }
            }
            _ => unreachable!("layer parameters follow the spec"),
        })
    }

    /// Normalises every affine operator flagged `lipschitz_normalized`.
    pub fn project_affine(&mut self) -> Result<()> {
        for (l, p) in self.spec.layers.iter().zip(&self.layers) {
            if let (LayerSpec::AffineConv(a), LayerParams::Affine { weights }) = (l, p) {
                if a.lipschitz_normalized {
                    let w = normalize_columns(self.params.raw(*weights))?;
                    *self.params.raw_mut(*weights) = w;
                }
            }
        }
        Ok(())
    }

    /// Places the network on `tape` and runs a batch `x` of N rows, each
    /// holding one flattened H·W·C example.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: &DenseMatrix) -> Result<TapeForward<'t>> {
        self.forward_layers(tape, bound, x, self.layers.len())
    }

    /// Like [`forward_tape`](Self::forward_tape) but stops after `depth`
    /// layers.
    pub fn forward_layers<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: &DenseMatrix,
        depth: usize,
    ) -> Result<TapeForward<'t>> {
        let input = self.spec.input;
        if x.cols() != input.volume() {
            return Err(Error::dims(format!("inputs have {} columns, network expects {}", x.cols(), input.volume())));
        }
        let batch = x.rows();
        if batch == 0 {
            return Err(Error::EmptyData);
        }
        let mut traces: Vec<LayerTrace<'t>> = Vec::with_capacity(depth);
        let mut kl = tape.scalar(0.0);
        let mut shape = input;
        let mut mean = tape.constant(x.clone().reshape(batch * input.positions(), input.channels)?);
        let mut var = mean;
        for (i, (ls, lp)) in self.spec.layers.iter().zip(&self.layers).take(depth).enumerate() {
            let trace = match (ls, lp) {
                (LayerSpec::ConvSvgp(c), LayerParams::Svgp(g)) => {
                    let (patches, ps) = extract_patches(mean, batch, shape, c.kernel_size, c.stride, 1)?;
                    let (gv, l) = self.gp_vars(bound, g);
                    let (t, m) = gp_block(
                        TapeInputs::Points(patches),
                        gv,
                        &l,
                        patches,
                        g.mean_projection.as_ref(),
                        self.jitter,
                        &self.ladder,
                    )?;
                    LayerTrace {
                        shape: MapShape::new(ps.height, ps.width, c.channels_out),
                        mean: m,
                        variance: t.variance,
                        gp: Some(GpTrace {
                            distributional: t.distributional,
                            within: t.within,
                            kl: t.kl,
                            min_raw_distributional: t.min_raw_distributional,
                        }),
                    }
                }
                (LayerSpec::DenseSvgp(c), LayerParams::Svgp(g)) => {
                    let flat = mean.reshape(batch, shape.volume());
                    let (gv, l) = self.gp_vars(bound, g);
                    let (t, m) =
                        gp_block(TapeInputs::Points(flat), gv, &l, flat, g.mean_projection.as_ref(), self.jitter, &self.ladder)?;
                    LayerTrace {
                        shape: MapShape::dense(c.outputs),
                        mean: m,
                        variance: t.variance,
                        gp: Some(GpTrace {
                            distributional: t.distributional,
                            within: t.within,
                            kl: t.kl,
                            min_raw_distributional: t.min_raw_distributional,
                        }),
                    }
                }
                (LayerSpec::DistGpActivation(c) | LayerSpec::DenseDistGp(c), LayerParams::DistGp(g)) => {
                    let dense = matches!(ls, LayerSpec::DenseDistGp(_));
                    let (m_in, v_in, out_shape) = if dense {
                        (
                            mean.reshape(batch, shape.volume()),
                            var.reshape(batch, shape.volume()),
                            MapShape::dense(c.channels_out),
                        )
                    } else {
                        (mean, var, MapShape::new(shape.height, shape.width, c.channels_out))
                    };
                    let (gv, l) = self.gp_vars(bound, g);
                    let (t, m) = gp_block(
                        TapeInputs::Moments(m_in, v_in),
                        gv,
                        &l,
                        m_in,
                        g.mean_projection.as_ref(),
                        self.jitter,
                        &self.ladder,
                    )?;
                    LayerTrace {
                        shape: out_shape,
                        mean: m,
                        variance: t.variance,
                        gp: Some(GpTrace {
                            distributional: t.distributional,
                            within: t.within,
                            kl: t.kl,
                            min_raw_distributional: t.min_raw_distributional,
                        }),
                    }
                }
                (LayerSpec::AffineConv(a), LayerParams::Affine { weights }) => {
                    let (m, v, s) =
                        affine_block(mean, var, batch, shape, bound.get(*weights), a.kernel_size, a.stride, a.dilation)?;
                    LayerTrace { shape: s, mean: m, variance: v, gp: None }
                }
                (LayerSpec::BarycentrePool(p), LayerParams::Pool { theta }) => {
                    let (m, v, s) = pool_block(mean, var, batch, shape, p.window, theta)?;
                    LayerTrace { shape: s, mean: m, variance: v, gp: None }
                }
                _ => unreachable!("layer {i} parameters follow the spec"),
            };
            if let Some(g) = &trace.gp {
                kl = kl + g.kl;
            }
            shape = trace.shape;
            mean = trace.mean;
            var = trace.variance;
            traces.push(trace);
        }
        Ok(TapeForward { batch, layers: traces, kl })
    }

    fn gp_vars<'t>(&self, bound: &Bound<'t>, g: &GpParams) -> (GpVars<'t>, Vec<Var<'t>>) {
        let inducing = match g.z_var {
            Some(v) => TapeInputs::Moments(bound.get(g.z), bound.get(v)),
            None => TapeInputs::Points(bound.get(g.z)),
        };
        let vars = GpVars {
            inducing,
            variance: bound.get(g.variance),
            lengthscales: bound.get(g.lengthscales),
            m_u: bound.get(g.m_u),
        };
        (vars, g.l_s.iter().map(|&id| bound.raw(id).lower_factor()).collect())
    }

    /// Deterministic prediction for a batch, rejecting variances below
    /// −1e−10 before clamping.
    pub fn forward(&self, x: &DenseMatrix) -> Result<NetOutput> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let f = self.forward_tape(&tape, &bound, x)?;
        for l in &f.layers {
            if let Some(g) = &l.gp {
                if g.min_raw_distributional <= -NEGATIVE_VARIANCE_TOLERANCE {
                    return Err(Error::NumericalIntegrity(format!(
                        "predicted variance {} below −{NEGATIVE_VARIANCE_TOLERANCE:e}",
                        g.min_raw_distributional
                    )));
                }
            }
        }
        let out = f.output();
        let gp = f.last_gp();
        Ok(NetOutput {
            shape: out.shape,
            mean: out.mean.value(),
            variance: out.variance.value(),
            distributional: gp.distributional.value(),
            within: gp.within.value(),
        })
    }

    /// Every layer's output moments for a batch.
    pub fn forward_trace(&self, x: &DenseMatrix) -> Result<Vec<MomentMap>> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let f = self.forward_tape(&tape, &bound, x)?;
        f.layers
            .iter()
            .map(|l| MomentMap::new(f.batch, l.shape, l.mean.value(), l.variance.value()))
            .collect()
    }

    /// [`forward`](Self::forward) over row chunks of at most `batch_size`,
    /// run on the rayon pool. Output rows are in input order.
    pub fn predict(&self, x: &DenseMatrix, batch_size: usize) -> Result<NetOutput> {
        let batch_size = batch_size.max(1);
        let chunks: Vec<DenseMatrix> = (0..x.rows())
            .step_by(batch_size)
            .map(|s| {
                let e = (s + batch_size).min(x.rows());
                let rows: Vec<usize> = (s..e).collect();
                select_rows(x, &rows)
            })
            .collect();
        if chunks.is_empty() {
            return Err(Error::EmptyData);
        }
        let parts = chunks.par_iter().map(|c| self.forward(c)).collect::<Result<Vec<_>>>()?;
        let shape = parts[0].shape;
        Ok(NetOutput {
            shape,
            mean: stack(parts.iter().map(|p| &p.mean)),
            variance: stack(parts.iter().map(|p| &p.variance)),
            distributional: stack(parts.iter().map(|p| &p.distributional)),
            within: stack(parts.iter().map(|p| &p.within)),
        })
    }
}

/// Copies the given rows.
pub fn select_rows(x: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(rows.len() * x.cols());
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    DenseMatrix::from_vec(rows.len(), x.cols(), data)
}

fn stack<'a>(parts: impl Iterator<Item = &'a DenseMatrix>) -> DenseMatrix {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for p in parts {
        rows += p.rows();
        cols = p.cols();
        data.extend_from_slice(p.data());
    }
    DenseMatrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{as_loss, check_gradients, GradCheckConfig};
    use crate::kernels::{w2_kernel, GaussianMoments};
    use crate::net::layers::conv_svgp_forward;
    use crate::numerics::{solve_lower, solve_lower_transpose};
    use crate::svgp::{predict_moments, SvgpInputs};

    fn perturb(net: &mut DistGpNet, seed: u64) {
        // move every parameter off its initial value so the tests are not
        // dominated by zero means
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let noise = randn(&mut rng, net.params().raw(id).rows(), net.params().raw(id).cols(), 0.3);
            let r = net.params_mut().raw_mut(id);
            *r = r.add(&noise).unwrap();
        }
    }

    #[test]
    fn single_conv_layer_matches_standalone() {
        let spec = NetworkSpec::from_json(
            r#"{"input": {"height": 6, "width": 5, "channels": 2},
                "layers": [{"type": "conv_svgp", "kernel_size": 3, "stride": 2, "inducing": 4, "channels_out": 3,
                            "mean_function": "average"}]}"#,
        )
        .unwrap();
        let mut net = DistGpNet::new(spec, 1).unwrap();
        perturb(&mut net, 2);
        let x = randn(&mut ChaCha8Rng::seed_from_u64(3), 3, 60, 1.0);
        let out = net.forward(&x).unwrap();
        let LayerState::ConvSvgp(layer) = net.layer_state(0).unwrap() else { panic!() };
        let map = conv_svgp_forward(&x, MapShape::new(6, 5, 2), &layer).unwrap();
        assert_eq!(out.mean, map.mean);
        assert_eq!(out.variance, map.variance);
        assert_eq!(out.shape, MapShape::new(2, 2, 3));
    }

    fn three_layer() -> DistGpNet {
        let spec = NetworkSpec::from_json(
            r#"{"input": {"height": 6, "width": 6, "channels": 1},
                "layers": [
                  {"type": "conv_svgp", "kernel_size": 3, "inducing": 5, "channels_out": 3},
                  {"type": "affine_conv", "kernel_size": 3, "channels_out": 2, "lipschitz_normalized": true},
                  {"type": "distgp_activation", "inducing": 4, "channels_out": 2, "mean_function": "identity"},
                  {"type": "barycentre_pool", "window": 2},
                  {"type": "dense_distgp", "inducing": 3, "channels_out": 2}
                ]}"#,
        )
        .unwrap();
        let mut net = DistGpNet::new(spec, 5).unwrap();
        perturb(&mut net, 6);
        net
    }

    #[test]
    fn forward_is_bit_stable() {
        let net = three_layer();
        let x = randn(&mut ChaCha8Rng::seed_from_u64(7), 4, 36, 1.0);
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, MapShape::dense(2));
        assert_eq!(a.mean.shape(), (4, 2));
        assert!(a.variance.data().iter().all(|&v| v >= 0.0));
        // chunked prediction stitches back to the same rows
        let c = net.predict(&x, 3).unwrap();
        for (p, q) in c.mean.data().iter().zip(a.mean.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_two_layer_matches_hand_pipeline() {
        let spec = NetworkSpec::from_json(
            r#"{"input": {"height": 1, "width": 1, "channels": 1},
                "layers": [
                  {"type": "dense_svgp", "inducing": 4, "outputs": 2},
                  {"type": "dense_distgp", "inducing": 3, "channels_out": 1}
                ]}"#,
        )
        .unwrap();
        let mut net = DistGpNet::new(spec, 8).unwrap();
        perturb(&mut net, 9);
        net.jitter = 0.0;
        let x = DenseMatrix::column(&[-1.0, -0.2, 0.4, 1.3, 2.0]);
        let out = net.forward(&x).unwrap();

        let h = predict_moments(
            &SvgpInputs::Points(x.clone()),
            &net.inducing(0).unwrap(),
            &net.posterior(0).unwrap(),
            &net.kernel(0).unwrap(),
        )
        .unwrap();
        let z = net.inducing(1).unwrap();
        let InducingSet::Distributional { mean: zm, variance: zv } = &z else { panic!() };
        let zs: Vec<GaussianMoments> =
            (0..3).map(|i| GaussianMoments::new(zm.row(i).to_vec(), zv.row(i).to_vec()).unwrap()).collect();
        let hs: Vec<GaussianMoments> =
            (0..5).map(|i| GaussianMoments::new(h.mean.row(i).to_vec(), h.variance.row(i).to_vec()).unwrap()).collect();
        let p = net.kernel(1).unwrap();
        let q = net.posterior(1).unwrap();
        let kuu = w2_kernel(&zs, &zs, &p).unwrap();
        let kuf = w2_kernel(&zs, &hs, &p).unwrap();
        let l = cholesky_jitter(&kuu, &JitterLadder::default()).unwrap().lower;
        let a = solve_lower_transpose(&l, &solve_lower(&l, &kuf).unwrap()).unwrap();
        let s = q.covariance(0);
        for n in 0..5 {
            let an: Vec<f64> = (0..3).map(|i| a.get(i, n)).collect();
            let mean: f64 = (0..3).map(|i| an[i] * q.mean.get(i, 0)).sum();
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += an[i] * (kuu.get(i, j) - s.get(i, j)) * an[j];
                }
            }
            let var = p.variance - quad;
            assert!((out.mean.get(n, 0) - mean).abs() < 1e-9, "{n}");
            assert!((out.variance.get(n, 0) - var).abs() < 1e-9, "{n}");
        }
    }

    #[test]
    fn elbo_like_loss_gradients_match_fd() {
        let net = three_layer();
        let x = randn(&mut ChaCha8Rng::seed_from_u64(10), 2, 36, 1.0);
        let y = randn(&mut ChaCha8Rng::seed_from_u64(11), 2, 2, 1.0);
        let loss = as_loss(|t: &Tape, b: &Bound<'_>| {
            let f = net.forward_tape(t, b, &x)?;
            let out = f.output();
            let fit = (out.mean - t.constant(y.clone())).square().sum() + out.variance.sum();
            Ok(fit + f.kl + f.last_gp().distributional.sum())
        });
        let report = check_gradients(&loss, net.params(), GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn projection_restores_normalization() {
        let mut net = three_layer();
        net.project_affine().unwrap();
        let LayerState::Affine(a) = net.layer_state(1).unwrap() else { panic!() };
        assert!(crate::net::lipschitz::lipschitz_bound_affine(&a) <= 1.0 + 1e-12);
    }

    #[test]
    fn from_parts_rejects_foreign_store() {
        let net = three_layer();
        let other = DistGpNet::new(
            NetworkSpec::from_json(
                r#"{"input": {"height": 1, "width": 1, "channels": 1},
                    "layers": [{"type": "dense_svgp", "inducing": 4, "outputs": 2}]}"#,
            )
            .unwrap(),
            1,
        )
        .unwrap();
        assert!(DistGpNet::from_parts(net.spec().clone(), other.params().clone(), 0.0).is_err());
    }
}
