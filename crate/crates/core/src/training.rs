//! ELBO assembly, data-driven initialisation and the Adam training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::gradients::{Bound, Constraint, ParamId};
use crate::likelihoods::{
    dirichlet_transform, heteroskedastic_expected_loglik_var, predict_class_probs, predictive_entropy,
    DEFAULT_ALPHA_EPSILON, DEFAULT_MC_SAMPLES,
};
use crate::net::layers::extract_patches;
use crate::net::model::{select_rows, DistGpNet, DEFAULT_JITTER};
use crate::net::spec::{LayerSpec, NetworkSpec};
use crate::net::{Checkpoint, MapShape};
use crate::numerics::{DenseMatrix, JitterLadder};
use crate::gradients::{as_loss, gradient, ParameterStore};
use crate::kernels::{se_ard_var, KernelParams};
use crate::svgp::{
    collapsed_sgpr, collapsed_terms, distributional_differential_entropy, gaussian_expected_loglik, CollapsedSgpr,
    NoiseModel,
};

pub const NOISE_PARAM: &str = "likelihood.noise_variance";
/// Floor for data-derived inducing variances.
pub const MIN_INDUCING_VARIANCE: f64 = 1e-6;

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    64
}
fn default_steps() -> usize {
    1000
}
fn default_jitter() -> f64 {
    DEFAULT_JITTER
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA_EPSILON
}
fn default_eval_every() -> usize {
    100
}
fn default_clip() -> f64 {
    10.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    256
}
fn default_kmeans_iters() -> usize {
    10
}
fn default_kmeans_points() -> usize {
    4000
}
fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Added to every `K_uu` before factorisation.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub jitter_ladder: JitterLadder,
    #[serde(default = "default_alpha")]
    pub alpha_epsilon: f64,
    #[serde(default)]
    pub lipschitz_projection: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Starting Gaussian noise variance (regression only).
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    /// Examples pushed through the network during initialisation.
    #[serde(default = "default_warmup")]
    pub warmup_size: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iterations: usize,
    /// Rows subsampled for k-means and the median heuristic.
    #[serde(default = "default_kmeans_points")]
    pub kmeans_max_points: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Store real elapsed time in the metrics log. Off by default so that
    /// seeded logs are byte-identical.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("warmup_size", self.warmup_size),
            ("kmeans_max_points", self.kmeans_max_points),
            ("mc_samples", self.mc_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be nonnegative, got {}", self.jitter));
        }
        if !(self.alpha_epsilon > 0.0 && self.alpha_epsilon < 0.5) {
            return Err(Error::InvalidAlpha(self.alpha_epsilon));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return bad(format!("noise_variance must be positive, got {}", self.noise_variance));
        }
        Ok(())
    }
}

/// Independent seed for a named random stream.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    task: Task,
    num_classes: Option<usize>,
    alpha_epsilon: f64,
}

/// A network plus its likelihood.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: DistGpNet,
    pub task: Task,
    /// Gaussian noise variance parameter (regression).
    pub noise: Option<ParamId>,
    pub num_classes: Option<usize>,
    pub alpha_epsilon: f64,
}

/// One minibatch bound, split into its parts.
pub struct BoundTerms<'t> {
    /// `(N/B)·ELL − KL`.
    pub elbo: Var<'t>,
    /// `(N/B)·ELL`.
    pub datafit: Var<'t>,
    pub kl: Var<'t>,
}

impl Model {
    /// Wraps `net` and registers any likelihood parameters in its store.
    pub fn new(mut net: DistGpNet, task: Task, num_classes: Option<usize>, config: &TrainConfig) -> Result<Self> {
        let out = net.output_shape();
        if out.positions() != 1 {
            return Err(Error::InvalidSpec(format!("network output {out:?} is not one vector per example")));
        }
        let noise = match task {
            Task::Regression => Some(net.params_mut().add(
                NOISE_PARAM,
                "likelihood",
                DenseMatrix::scalar(config.noise_variance),
                Constraint::Positive,
            )?),
            Task::Classification => {
                let k = num_classes.ok_or_else(|| Error::Config("classification needs num_classes".into()))?;
                if k != out.channels {
                    return Err(Error::InvalidSpec(format!("{k} classes but {} network outputs", out.channels)));
                }
                None
            }
        };
        net.jitter = config.jitter;
        net.ladder = config.jitter_ladder.clone();
        Ok(Self { net, task, noise, num_classes, alpha_epsilon: config.alpha_epsilon })
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::to_value(ModelMeta {
            task: self.task,
            num_classes: self.num_classes,
            alpha_epsilon: self.alpha_epsilon,
        })
        .expect("plain struct")
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(
            ckpt.metadata.get("model").cloned().ok_or_else(|| Error::Checkpoint("no model metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
        let noise = ckpt.net.params().id(NOISE_PARAM);
        if (meta.task == Task::Regression) != noise.is_some() {
            return Err(Error::Checkpoint("likelihood parameters do not match the task".into()));
        }
        Ok(Self {
            net: ckpt.net,
            task: meta.task,
            noise,
            num_classes: meta.num_classes,
            alpha_epsilon: meta.alpha_epsilon,
        })
    }

    /// Saves under `{"model": ..., extra...}`.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert("model".into(), self.metadata());
        if let serde_json::Value::Object(m) = extra {
            meta.extend(m);
        }
        crate::net::save_checkpoint(path, &self.net, &serde_json::Value::Object(meta))
    }

    pub fn noise_variance(&self) -> Option<f64> {
        self.noise.map(|id| self.net.params().value(id).get(0, 0))
    }

    /// Minibatch bound on rows `rows` of `data`, with the data term scaled
    /// to the full dataset size.
    pub fn bound_terms<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        data: &Dataset,
        rows: &[usize],
    ) -> Result<BoundTerms<'t>> {
        if rows.is_empty() || data.is_empty() {
            return Err(Error::EmptyData);
        }
        let x = select_rows(&data.inputs, rows);
        let f = self.net.forward_tape(tape, bound, &x)?;
        let out = f.output();
        let ell = match (&data.targets, self.task) {
            (Targets::Real(y), Task::Regression) => {
                if y.cols() != out.mean.cols() {
                    return Err(Error::dims(format!("{} targets for {} outputs", y.cols(), out.mean.cols())));
                }
                let noise = bound.get(self.noise.expect("regression models carry a noise parameter"));
                gaussian_expected_loglik(tape.constant(select_rows(y, rows)), out.mean, out.variance, noise)
            }
            (Targets::Classes { labels, num_classes }, Task::Classification) => {
                if Some(*num_classes) != self.num_classes {
                    return Err(Error::dims(format!("dataset has {num_classes} classes, model {:?}", self.num_classes)));
                }
                let batch: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
                let t = dirichlet_transform(&batch, *num_classes, self.alpha_epsilon)?;
                heteroskedastic_expected_loglik_var(
                    out.mean,
                    out.variance,
                    tape.constant(t.mean),
                    tape.constant(t.variance),
                )
            }
            _ => return Err(Error::Config("dataset targets do not match the model task".into())),
        };
        let datafit = ell.scale(data.len() as f64 / rows.len() as f64);
        Ok(BoundTerms { elbo: datafit - f.kl, datafit, kl: f.kl })
    }

    /// Full-data ELBO, evaluated in chunks of `batch_size` rows.
    pub fn elbo(&self, data: &Dataset, batch_size: usize) -> Result<f64> {
        let mut datafit = 0.0;
        let mut kl = 0.0;
        for start in (0..data.len()).step_by(batch_size.max(1)) {
            let rows: Vec<usize> = (start..(start + batch_size.max(1)).min(data.len())).collect();
            let tape = Tape::new();
            let bound = self.net.params().bind_constant(&tape);
            let t = self.bound_terms(&tape, &bound, data, &rows)?;
            datafit += t.datafit.scalar_value() * rows.len() as f64 / data.len() as f64;
            kl = t.kl.scalar_value();
        }
        Ok(datafit - kl)
    }

    pub fn predict(&self, x: &DenseMatrix, batch_size: usize, mc_samples: usize, seed: u64) -> Result<Predictions> {
        let out = self.net.predict(x, batch_size)?;
        let distributional = out.distributional.col(0);
        let distributional_entropy = distributional_differential_entropy(&distributional);
        let (probs, predictive) = match self.task {
            Task::Classification => {
                let p = predict_class_probs(&out.mean, &out.variance, mc_samples, derive_seed(seed, "predict"))?;
                let h = (0..p.probs.rows()).map(|i| predictive_entropy(p.probs.row(i))).collect::<Result<Vec<_>>>()?;
                (Some(p.probs), h)
            }
            Task::Regression => {
                let noise = self.noise_variance().unwrap_or(0.0);
                let h = (0..out.variance.rows())
                    .map(|i| {
                        out.variance
                            .row(i)
                            .iter()
                            .map(|v| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * (v + noise)).ln())
                            .sum()
                    })
                    .collect();
                (None, h)
            }
        };
        Ok(Predictions {
            mean: out.mean,
            variance: out.variance,
            within: out.within,
            distributional,
            distributional_entropy,
            predictive_entropy: predictive,
            probs,
        })
    }
}

/// Per-example predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub mean: DenseMatrix,
    /// Total latent variance, N×C.
    pub variance: DenseMatrix,
    pub within: DenseMatrix,
    pub distributional: Vec<f64>,
    pub distributional_entropy: Vec<f64>,
    /// Entropy of the class probabilities, or of the Gaussian predictive
    /// (noise included) for regression.
    pub predictive_entropy: Vec<f64>,
    pub probs: Option<DenseMatrix>,
}

impl Predictions {
    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        self.probs.as_ref().map(|p| {
            (0..p.rows())
                .map(|i| {
                    p.row(i)
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
                        .0
                })
                .collect()
        })
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::dims(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(predicted.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

pub fn rmse(mean: &DenseMatrix, targets: &DenseMatrix) -> Result<f64> {
    if mean.shape() != targets.shape() {
        return Err(Error::dims(format!("predictions {:?} vs targets {:?}", mean.shape(), targets.shape())));
    }
    if mean.is_empty() {
        return Err(Error::EmptyData);
    }
    let sq: f64 = mean.data().iter().zip(targets.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / mean.len() as f64).sqrt())
}

/// Median of the pairwise Euclidean distances between rows.
pub fn median_pairwise_distance(x: &DenseMatrix) -> f64 {
    let n = x.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `k` centroids of the rows of `x`: k-means++ seeding then Lloyd steps.
/// With at most `k` rows the rows themselves are returned (padded by
/// repetition), and `None` signals fewer than `k` distinct rows.
pub fn kmeans(x: &DenseMatrix, k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Option<DenseMatrix> {
    let (n, d) = x.shape();
    if n == 0 || k == 0 {
        return None;
    }
    if n == k {
        return Some(x.clone());
    }
    let mut centres: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = best.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut u = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &b) in best.iter().enumerate() {
            if u < b {
                pick = i;
                break;
            }
            u -= b;
        }
        let c = x.row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(x.row(i), &c));
        }
        centres.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for i in 0..n {
            let a = (0..k)
                .map(|c| (c, sq_dist(x.row(i), &centres[c])))
                .fold((0, f64::INFINITY), |b, (c, v)| if v < b.1 { (c, v) } else { b })
                .0;
            changed |= a != assign[i];
            assign[i] = a;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centre
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Some(DenseMatrix::from_fn(k, d, |i, j| centres[i][j]))
}

fn subsample(x: &DenseMatrix, max: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    if x.rows() <= max {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.shuffle(rng);
    idx.truncate(max);
    idx.sort_unstable();
    select_rows(x, &idx)
}

/// Inducing locations for `m` points from the rows of `x`. Tiny data uses
/// the rows directly; degenerate data (fewer distinct rows than `m`) keeps
/// `fallback` shifted onto the data mean.
fn inducing_from(x: &DenseMatrix, m: usize, fallback: &DenseMatrix, iters: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    if x.rows() == m {
        return x.clone();
    }
    if let Some(c) = kmeans(x, m, iters, rng) {
        return c;
    }
    let d = x.cols();
    let mean: Vec<f64> = (0..d).map(|j| x.col(j).iter().sum::<f64>() / x.rows().max(1) as f64).collect();
    DenseMatrix::from_fn(m, d, |i, j| mean[j] + fallback.get(i, j))
}

/// Builds a model whose inducing points and lengthscales come from the
/// data: each GP layer sees the warmup batch propagated through the layers
/// already initialised below it.
pub fn init_model(spec: NetworkSpec, data: &Dataset, task: Task, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if data.shape != spec.input {
        return Err(Error::dims(format!("data shape {:?} vs network input {:?}", data.shape, spec.input)));
    }
    let seed = config.seed;
    let mut net = DistGpNet::new(spec, derive_seed(seed, "init"))?;
    net.jitter = config.jitter;
    net.ladder = config.jitter_ladder.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "warmup"));
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(config.warmup_size);
    idx.sort_unstable();
    let warm = select_rows(&data.inputs, &idx);
    let b = warm.rows();

    for i in net.gp_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("kmeans/l{i}")));
        let g = net.gp_params(i).cloned().expect("GP layer");
        // rows the layer's kernel sees, as (mean, optional variance)
        let (rows_m, rows_v) = {
            let tape = Tape::new();
            let bound = net.params().bind_constant(&tape);
            let f = net.forward_layers(&tape, &bound, &warm, i)?;
            let (shape, mean, var): (MapShape, DenseMatrix, Option<DenseMatrix>) = match f.layers.last() {
                None => (net.spec().input, warm.clone().reshape(b * net.spec().input.positions(), net.spec().input.channels)?, None),
                Some(t) => (t.shape, t.mean.value(), Some(t.variance.value())),
            };
            match &net.spec().layers[i] {
                LayerSpec::ConvSvgp(c) => {
                    let (p, _) = extract_patches(tape.constant(mean), b, shape, c.kernel_size, c.stride, 1)?;
                    (p.value(), None)
                }
                LayerSpec::DenseSvgp(_) => (mean.reshape(b, shape.volume())?, None),
                LayerSpec::DenseDistGp(_) => (
                    mean.reshape(b, shape.volume())?,
                    Some(var.expect("DistGP follows a layer").reshape(b, shape.volume())?),
                ),
                _ => (mean, var),
            }
        };
        let m = net.params().raw(g.z).rows();
        let fallback = net.params().value(g.z);
        let d = rows_m.cols();
        match rows_v {
            None => {
                let x = subsample(&rows_m, config.kmeans_max_points, &mut rng);
                let z = inducing_from(&x, m, &fallback, config.kmeans_iterations, &mut rng);
                net.params_mut().set_value(g.z, z)?;
                let med = median_pairwise_distance(&subsample(&x, 1000, &mut rng));
                if med > 0.0 && !kernel_fixed(&net, i) {
                    net.params_mut().set_value(g.lengthscales, DenseMatrix::filled(1, d, med * med))?;
                }
            }
            Some(v) => {
                // cluster in W2 feature space [m, √v]
                let feats = DenseMatrix::from_fn(rows_m.rows(), 2 * d, |r, j| {
                    if j < d { rows_m.get(r, j) } else { v.get(r, j - d).max(0.0).sqrt() }
                });
                let x = subsample(&feats, config.kmeans_max_points, &mut rng);
                let fb = DenseMatrix::from_fn(m, 2 * d, |r, j| if j < d { fallback.get(r, j) } else { 0.0 });
                let z = inducing_from(&x, m, &fb, config.kmeans_iterations, &mut rng);
                let zm = DenseMatrix::from_fn(m, d, |r, j| z.get(r, j));
                let zv = DenseMatrix::from_fn(m, d, |r, j| z.get(r, d + j).powi(2).max(MIN_INDUCING_VARIANCE));
                net.params_mut().set_value(g.z, zm)?;
                net.params_mut().set_value(g.z_var.expect("distributional inducing set"), zv)?;
                let med = median_pairwise_distance(&subsample(&x, 1000, &mut rng));
                if med > 0.0 && !kernel_fixed(&net, i) {
                    net.params_mut().set_value(g.lengthscales, DenseMatrix::filled(1, d, med * med))?;
                }
            }
        }
        net.reset_variational(i)?;
    }
    let num_classes = data.num_classes();
    Model::new(net, task, num_classes, config)
}

fn kernel_fixed(net: &DistGpNet, i: usize) -> bool {
    match &net.spec().layers[i] {
        LayerSpec::ConvSvgp(c) => c.kernel.lengthscale.is_some(),
        LayerSpec::DenseSvgp(c) => c.kernel.lengthscale.is_some(),
        LayerSpec::DistGpActivation(c) | LayerSpec::DenseDistGp(c) => c.kernel.lengthscale.is_some(),
        _ => true,
    }
}

/// One line of the metrics log: window means since the previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub elbo: f64,
    pub datafit: f64,
    pub kl: f64,
    pub wallclock_ms: u64,
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Training stopped early. The model holds the last parameters whose loss
/// was finite.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    /// Steps completed before the failure.
    pub step: usize,
    pub history: Vec<MetricRecord>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed after {} steps: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {}

struct Adam {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    t: i32,
}

pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> std::result::Result<Vec<MetricRecord>, TrainFailure> {
    train_with(model, data, config, |_, _| {})
}

/// [`train`] with a callback run after every completed step.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &Model),
) -> std::result::Result<Vec<MetricRecord>, TrainFailure> {
    let fail = |error, step, history| TrainFailure { error, step, history };
    if let Err(e) = config.validate() {
        return Err(fail(e, 0, Vec::new()));
    }
    if data.is_empty() {
        return Err(fail(Error::EmptyData, 0, Vec::new()));
    }
    let n = data.len();
    let batch = config.batch_size.min(n);
    let ids: Vec<ParamId> = model.net.params().ids().collect();
    let mut adam = Adam {
        m: ids.iter().map(|&id| DenseMatrix::zeros(model.net.params().raw(id).rows(), model.net.params().raw(id).cols())).collect(),
        v: ids.iter().map(|&id| DenseMatrix::zeros(model.net.params().raw(id).rows(), model.net.params().raw(id).cols())).collect(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    for step in 0..config.max_steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;

        let tape = Tape::new();
        let bound = model.net.params().bind(&tape);
        let evaluated = model.bound_terms(&tape, &bound, data, rows).and_then(|t| {
            let (elbo, datafit, kl) = (t.elbo.scalar_value(), t.datafit.scalar_value(), t.kl.scalar_value());
            if !elbo.is_finite() {
                return Err(Error::NonFiniteLoss(-elbo));
            }
            let g = tape.backward(t.elbo.scale(-1.0));
            let grads: Vec<DenseMatrix> = ids.iter().map(|&id| g.wrt(bound.raw(id))).collect();
            if grads.iter().any(|m| !m.is_finite()) {
                return Err(Error::NumericalIntegrity("non-finite gradient".into()));
            }
            Ok((elbo, datafit, kl, grads))
        });
        let (elbo, datafit, kl, mut grads) = match evaluated {
            Ok(v) => v,
            Err(e) => return Err(fail(e, step, history)),
        };
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > config.clip_norm {
            let s = config.clip_norm / norm;
            for g in &mut grads {
                *g = g.scale(s);
            }
        }
        let last_good = model.net.params().clone();
        adam.t += 1;
        let bc1 = 1.0 - config.beta1.powi(adam.t);
        let bc2 = 1.0 - config.beta2.powi(adam.t);
        for (k, &id) in ids.iter().enumerate() {
            if !model.net.params().is_trainable(id) {
                continue;
            }
            let (m, v, g) = (&mut adam.m[k], &mut adam.v[k], &grads[k]);
            let raw = model.net.params_mut().raw_mut(id);
            for j in 0..g.len() {
                let gj = g.data()[j];
                let mj = config.beta1 * m.data()[j] + (1.0 - config.beta1) * gj;
                let vj = config.beta2 * v.data()[j] + (1.0 - config.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                raw.data_mut()[j] -= config.learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + config.adam_epsilon);
            }
        }
        if config.lipschitz_projection {
            if let Err(e) = model.net.project_affine() {
                *model.net.params_mut() = last_good;
                return Err(fail(e, step, history));
            }
        }
        window = (window.0 + elbo, window.1 + datafit, window.2 + kl, window.3 + 1);
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.max_steps {
            let c = window.3 as f64;
            history.push(MetricRecord {
                step: done,
                elbo: window.0 / c,
                datafit: window.1 / c,
                kl: window.2 / c,
                wallclock_ms: if config.record_wallclock { start.elapsed().as_millis() as u64 } else { 0 },
            });
            window = (0.0, 0.0, 0.0, 0);
        }
        on_step(done, model);
    }
    Ok(history)
}

/// Hyperparameters and inducing inputs fitted by maximising the collapsed
/// bound.
#[derive(Clone, Debug)]
pub struct CollapsedFit {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    pub inducing: DenseMatrix,
    pub result: CollapsedSgpr,
    /// Bound value at every step.
    pub history: Vec<f64>,
}

/// Adam on the negative collapsed bound over kernel variance,
/// lengthscales, noise variance and inducing inputs.
pub fn fit_collapsed_sgpr(
    x: &DenseMatrix,
    y: &[f64],
    z: &DenseMatrix,
    kernel: &KernelParams,
    noise_variance: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<CollapsedFit> {
    if x.rows() != y.len() {
        return Err(Error::dims("one target per input row"));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyData);
    }
    let mut store = ParameterStore::new();
    let zid = store.add("z", "inducing", z.clone(), Constraint::Unconstrained)?;
    let sid = store.add("variance", "kernel", DenseMatrix::scalar(kernel.variance), Constraint::Positive)?;
    let lid = store.add("lengthscales", "kernel", DenseMatrix::row_vector(&kernel.lengthscales), Constraint::Positive)?;
    let nid = store.add("noise", "likelihood", DenseMatrix::scalar(noise_variance), Constraint::Positive)?;
    let yv = DenseMatrix::column(y);
    let ladder = JitterLadder::default();
    let loss = as_loss(|tape, b| {
        let (zt, s, l) = (b.get(zid), b.get(sid), b.get(lid));
        let xt = tape.constant(x.clone());
        let kuu = se_ard_var(zt, zt, s, l);
        let kuf = se_ard_var(zt, xt, s, l);
        let t = collapsed_terms(kuu, kuf, tape.constant(yv.clone()), s, b.get(nid), &ladder)?;
        Ok(t.bound.scale(-1.0))
    });
    let ids: Vec<ParamId> = store.ids().collect();
    let mut m: Vec<DenseMatrix> = ids.iter().map(|&id| store.raw(id).map(|_| 0.0)).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut history = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = gradient(&loss, &store)?;
        history.push(-g.loss);
        for (k, &id) in ids.iter().enumerate() {
            let raw = store.raw_mut(id);
            for j in 0..raw.len() {
                let gj = g.grads[k].data()[j];
                let mj = b1 * m[k].data()[j] + (1.0 - b1) * gj;
                let vj = b2 * v[k].data()[j] + (1.0 - b2) * gj * gj;
                m[k].data_mut()[j] = mj;
                v[k].data_mut()[j] = vj;
                let mh = mj / (1.0 - b1.powi(t as i32));
                let vh = vj / (1.0 - b2.powi(t as i32));
                raw.data_mut()[j] -= learning_rate * mh / (vh.sqrt() + eps);
            }
        }
    }
    let kernel = KernelParams::new(store.value(sid).get(0, 0), store.value(lid).data().to_vec())?;
    let noise_variance = store.value(nid).get(0, 0);
    let inducing = store.value(zid);
    let result = collapsed_sgpr(x, y, &inducing, &kernel, NoiseModel::new(noise_variance)?)?;
    Ok(CollapsedFit { kernel, noise_variance, inducing, result, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_banana, gen_toy_regression};
    use crate::net::lipschitz::lipschitz_bound_affine;
    use crate::net::model::LayerState;
    use crate::net::spec::{AffineConvSpec, DenseSvgpSpec, DistGpSpec, KernelInit, MeanFunction};

    fn dense_svgp(m: usize, out: usize) -> LayerSpec {
        LayerSpec::DenseSvgp(DenseSvgpSpec {
            inducing: m,
            outputs: out,
            mean_function: MeanFunction::Zero,
            kernel: KernelInit::default(),
        })
    }

    #[test]
    fn median_heuristic_example() {
        let x = DenseMatrix::column(&[0.0, 1.0, 2.0]);
        // distances 1, 1, 2
        assert_eq!(median_pairwise_distance(&x), 1.0);
        let d = Dataset::new(
            x.clone(),
            MapShape::dense(1),
            Targets::Real(DenseMatrix::column(&[0.0, 1.0, 0.0])),
            "t",
        )
        .unwrap();
        let spec = NetworkSpec { input: MapShape::dense(1), layers: vec![dense_svgp(2, 1)] };
        let m = init_model(spec, &d, Task::Regression, &TrainConfig::default()).unwrap();
        assert!((m.net.kernel(0).unwrap().lengthscales[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_data_uses_the_points() {
        let d = gen_toy_regression(6, None, 1).unwrap();
        let spec = NetworkSpec { input: MapShape::dense(1), layers: vec![dense_svgp(6, 1)] };
        let cfg = TrainConfig::default();
        let m = init_model(spec.clone(), &d, Task::Regression, &cfg).unwrap();
        let z = m.net.params().value(m.net.gp_params(0).unwrap().z);
        assert_eq!(z, d.inputs);
        let again = init_model(spec, &d, Task::Regression, &cfg).unwrap();
        for id in m.net.params().ids() {
            assert_eq!(m.net.params().raw(id), again.net.params().raw(id));
        }
        assert!(matches!(
            init_model(
                NetworkSpec { input: MapShape::dense(1), layers: vec![dense_svgp(2, 1)] },
                &d.take(0),
                Task::Regression,
                &cfg
            ),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut pts = Vec::new();
        for c in [0.0, 10.0, 20.0] {
            for k in 0..5 {
                pts.push(c + 0.1 * k as f64);
            }
        }
        let x = DenseMatrix::column(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = kmeans(&x, 3, 20, &mut rng).unwrap().col(0);
        c.sort_by(f64::total_cmp);
        for (got, want) in c.iter().zip([0.2, 10.2, 20.2]) {
            assert!((got - want).abs() < 1e-9, "{c:?}");
        }
        assert!(kmeans(&DenseMatrix::filled(5, 1, 1.0), 3, 5, &mut rng).is_none());
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.clip_norm, 10.0);
        c.validate().unwrap();
        let bad: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"learning_rat": 1}"#);
        assert!(bad.is_err());
        let c = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    fn toy_model(seed: u64) -> (Model, Dataset, TrainConfig) {
        let d = gen_toy_regression(100, None, seed).unwrap();
        let spec = NetworkSpec { input: MapShape::dense(1), layers: vec![dense_svgp(10, 1)] };
        let cfg = TrainConfig { learning_rate: 0.005, batch_size: 100, max_steps: 2000, seed, ..TrainConfig::default() };
        (init_model(spec, &d, Task::Regression, &cfg).unwrap(), d, cfg)
    }

    #[test]
    fn zero_steps_leave_the_model_alone() {
        let (mut m, d, cfg) = toy_model(0);
        let before = m.net.params().clone();
        let h = train(&mut m, &d, &TrainConfig { max_steps: 0, ..cfg }).unwrap();
        assert!(h.is_empty());
        for id in before.ids() {
            assert_eq!(before.raw(id), m.net.params().raw(id));
        }
    }

    #[test]
    fn toy_regression_elbo_trend() {
        let (mut m, d, cfg) = toy_model(0);
        let initial = m.elbo(&d, 100).unwrap();
        let h = train(&mut m, &d, &cfg).unwrap();
        assert_eq!(h.len(), 20);
        let last = m.elbo(&d, 100).unwrap();
        assert!(last >= initial, "{initial} -> {last}");
        for w in h.windows(2) {
            assert!(w[1].elbo >= w[0].elbo - 0.01 * w[0].elbo.abs(), "{:?} -> {:?}", w[0], w[1]);
        }
        assert!(h.iter().all(|r| r.kl >= 0.0));
        let p = m.predict(&d.inputs, 50, 1, 0).unwrap();
        let Targets::Real(y) = &d.targets else { panic!() };
        assert!(rmse(&p.mean, y).unwrap() <= 2.0 * crate::data::TOY_NOISE_STD);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let run = || {
            let (mut m, d, cfg) = toy_model(5);
            let cfg = TrainConfig { max_steps: 150, batch_size: 16, eval_every: 50, ..cfg };
            let h = train(&mut m, &d, &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            write_metrics(&p, &h).unwrap();
            std::fs::read(p).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_returns_last_good() {
        let (mut m, d, cfg) = toy_model(0);
        let mut y = DenseMatrix::column(&vec![0.0; 100]);
        y.set(3, 0, f64::NAN);
        let bad = d.with_inputs(d.inputs.clone()).unwrap();
        let bad = Dataset { targets: Targets::Real(y), ..bad };
        let before = m.net.params().clone();
        let err = train(&mut m, &bad, &cfg).unwrap_err();
        assert!(matches!(err.error, Error::NonFiniteLoss(_)));
        assert_eq!(err.step, 0);
        for id in before.ids() {
            assert_eq!(before.raw(id), m.net.params().raw(id));
        }
    }

    #[test]
    fn zero_mean_first_layer_keeps_hidden_means_at_zero() {
        let d = gen_banana(100, 3).unwrap();
        let first_layer_mean = |mean_function| {
            let spec = NetworkSpec {
                input: MapShape::dense(2),
                layers: vec![
                    LayerSpec::DenseSvgp(DenseSvgpSpec {
                        inducing: 8,
                        outputs: 3,
                        mean_function,
                        kernel: KernelInit::default(),
                    }),
                    LayerSpec::DenseDistGp(DistGpSpec {
                        inducing: 8,
                        channels_out: 2,
                        mean_function: MeanFunction::Zero,
                        kernel: KernelInit::default(),
                    }),
                ],
            };
            let cfg = TrainConfig { learning_rate: 0.05, batch_size: 50, max_steps: 20, ..TrainConfig::default() };
            let mut m = init_model(spec, &d, Task::Classification, &cfg).unwrap();
            train(&mut m, &d, &cfg).unwrap();
            let id = m.net.gp_params(0).unwrap().m_u;
            m.net.params().value(id).max_abs()
        };
        // sign symmetry of the W2 kernel: the mean gradient is exactly zero
        assert_eq!(first_layer_mean(MeanFunction::Zero), 0.0);
        assert!(first_layer_mean(MeanFunction::Identity) > 1e-3);
    }

    #[test]
    fn projection_holds_after_every_step() {
        let d = gen_banana(100, 2).unwrap();
        let spec = NetworkSpec {
            input: MapShape::dense(2),
            layers: vec![
                dense_svgp(8, 3),
                LayerSpec::AffineConv(AffineConvSpec {
                    kernel_size: 1,
                    channels_out: 3,
                    stride: 1,
                    dilation: 1,
                    lipschitz_normalized: true,
                }),
                LayerSpec::DenseDistGp(DistGpSpec {
                    inducing: 8,
                    channels_out: 2,
                    mean_function: MeanFunction::Zero,
                    kernel: KernelInit::default(),
                }),
            ],
        };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            max_steps: 30,
            eval_every: 10,
            lipschitz_projection: true,
            ..TrainConfig::default()
        };
        let mut m = init_model(spec, &d, Task::Classification, &cfg).unwrap();
        let mut checked = 0;
        let h = train_with(&mut m, &d, &cfg, |_, m| {
            let LayerState::Affine(a) = m.net.layer_state(1).unwrap() else { panic!() };
            assert!(lipschitz_bound_affine(&a) <= 1.0 + 1e-12);
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 30);
        assert!(h.iter().all(|r| r.kl >= 0.0));
    }

    #[test]
    fn checkpoint_round_trip_keeps_the_likelihood() {
        let (m, _, _) = toy_model(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        m.save(&p, serde_json::json!({"note": 1})).unwrap();
        let back = Model::from_checkpoint(crate::net::load_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(back.task, Task::Regression);
        assert_eq!(back.noise_variance(), m.noise_variance());
    }

    #[test]
    fn collapsed_fit_reaches_the_data_fit_optimum() {
        let d = gen_toy_regression(50, None, 11).unwrap();
        let Targets::Real(y) = &d.targets else { panic!() };
        let z = DenseMatrix::from_fn(8, 1, |i, _| 6.5 * i as f64 / 7.0);
        let k = KernelParams::new(1.0, vec![1.0]).unwrap();
        let fit = fit_collapsed_sgpr(&d.inputs, &y.col(0), &z, &k, 0.1, 1500, 0.02).unwrap();
        assert!(fit.history.last().unwrap() > &fit.history[0]);
        let ratio = fit.result.data_fit / 25.0;
        assert!((0.95..=1.05).contains(&ratio), "{ratio}");
    }
}
