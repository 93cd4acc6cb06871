use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial shape of an image-like map; dense data uses `1×1×D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn dense(dim: usize) -> Self {
        Self::new(1, 1, dim)
    }

    /// Values per example.
    pub fn volume(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Deterministic mean function of a GP layer, applied to input means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFunction {
    #[default]
    Zero,
    /// Every output equals the average of the input coordinates.
    Average,
    /// Identity on the leading coordinates, zero-padded or truncated.
    Identity,
}

/// Optional fixed starting values for a GP layer's kernel. Unset values
/// are filled by the data-driven initialisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelInit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    /// Squared lengthscale shared by every input dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSvgpSpec {
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub inducing: usize,
    pub channels_out: usize,
    #[serde(default)]
    pub mean_function: MeanFunction,
    #[serde(default)]
    pub kernel: KernelInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConvSpec {
    pub kernel_size: usize,
    pub channels_out: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default)]
    pub lipschitz_normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistGpSpec {
    pub inducing: usize,
    pub channels_out: usize,
    #[serde(default)]
    pub mean_function: MeanFunction,
    #[serde(default)]
    pub kernel: KernelInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    /// Row-major `window×window` barycentric weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSvgpSpec {
    pub inducing: usize,
    pub outputs: usize,
    #[serde(default)]
    pub mean_function: MeanFunction,
    #[serde(default)]
    pub kernel: KernelInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    ConvSvgp(ConvSvgpSpec),
    AffineConv(AffineConvSpec),
    #[serde(rename = "distgp_activation")]
    DistGpActivation(DistGpSpec),
    BarycentrePool(PoolSpec),
    DenseSvgp(DenseSvgpSpec),
    /// Flattens the map, then applies a W2-kernel SVGP.
    #[serde(rename = "dense_distgp")]
    DenseDistGp(DistGpSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ConvSvgp(_) => "conv_svgp",
            Self::AffineConv(_) => "affine_conv",
            Self::DistGpActivation(_) => "distgp_activation",
            Self::BarycentrePool(_) => "barycentre_pool",
            Self::DenseSvgp(_) => "dense_svgp",
            Self::DenseDistGp(_) => "dense_distgp",
        }
    }

    pub fn is_gp(&self) -> bool {
        !matches!(self, Self::AffineConv(_) | Self::BarycentrePool(_))
    }

    fn is_first_kind(&self) -> bool {
        matches!(self, Self::ConvSvgp(_) | Self::DenseSvgp(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: MapShape,
    pub layers: Vec<LayerSpec>,
}

/// Output size of a valid (unpadded) convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, dilation: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    if input < span {
        return None;
    }
    Some((input - span) / stride + 1)
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidSpec(format!("{what} must be positive")));
    }
    Ok(())
}

fn check_kernel_init(layer: usize, k: &KernelInit) -> Result<()> {
    for (what, v) in [("variance", k.variance), ("lengthscale", k.lengthscale)] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("layer {layer}: kernel {what} must be positive, got {v}")));
            }
        }
    }
    Ok(())
}

/// Uniform or validated barycentric pooling weights.
pub fn pool_weights(spec: &PoolSpec) -> Result<Vec<f64>> {
    let n = spec.window * spec.window;
    match &spec.weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::InvalidSpec(format!("pool needs {n} weights, got {}", w.len())));
            }
            if w.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
                return Err(Error::InvalidSpec("pool weights must be nonnegative".into()));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!("pool weights sum to {s}, not 1")));
            }
            Ok(w.clone())
        }
    }
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks layer ordering and shape arithmetic, returning the shape
    /// after every layer.
    pub fn shapes(&self) -> Result<Vec<MapShape>> {
        let mut s = self.input;
        positive("input height", s.height)?;
        positive("input width", s.width)?;
        positive("input channels", s.channels)?;
        match self.layers.first() {
            None => return Err(Error::InvalidSpec("network has no layers".into())),
            Some(l) if !l.is_first_kind() => {
                return Err(Error::InvalidSpec(format!(
                    "first layer must be conv_svgp or dense_svgp, got {}",
                    l.kind()
                )))
            }
            _ => {}
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && layer.is_first_kind() {
                return Err(Error::InvalidSpec(format!("layer {i}: {} may only be the first layer", layer.kind())));
            }
            s = match layer {
                LayerSpec::ConvSvgp(c) => {
                    positive("inducing", c.inducing)?;
                    positive("channels_out", c.channels_out)?;
                    check_kernel_init(i, &c.kernel)?;
                    let ho = conv_output_size(s.height, c.kernel_size, c.stride, 1);
                    let wo = conv_output_size(s.width, c.kernel_size, c.stride, 1);
                    match (ho, wo) {
                        (Some(h), Some(w)) => MapShape::new(h, w, c.channels_out),
                        _ => {
                            return Err(Error::dims(format!(
                                "layer {i}: kernel {} stride {} does not fit {}x{}",
                                c.kernel_size, c.stride, s.height, s.width
                            )))
                        }
                    }
                }
                LayerSpec::AffineConv(a) => {
                    positive("channels_out", a.channels_out)?;
                    let ho = conv_output_size(s.height, a.kernel_size, a.stride, a.dilation);
                    let wo = conv_output_size(s.width, a.kernel_size, a.stride, a.dilation);
                    match (ho, wo) {
                        (Some(h), Some(w)) => MapShape::new(h, w, a.channels_out),
                        _ => {
                            return Err(Error::dims(format!(
                                "layer {i}: affine kernel {} (stride {}, dilation {}) does not fit {}x{}",
                                a.kernel_size, a.stride, a.dilation, s.height, s.width
                            )))
                        }
                    }
                }
                LayerSpec::DistGpActivation(d) => {
                    positive("inducing", d.inducing)?;
                    positive("channels_out", d.channels_out)?;
                    check_kernel_init(i, &d.kernel)?;
                    MapShape::new(s.height, s.width, d.channels_out)
                }
                LayerSpec::BarycentrePool(p) => {
                    positive("window", p.window)?;
                    pool_weights(p)?;
                    if !s.height.is_multiple_of(p.window) || !s.width.is_multiple_of(p.window) {
                        return Err(Error::dims(format!(
                            "layer {i}: pool window {} does not divide {}x{}",
                            p.window, s.height, s.width
                        )));
                    }
                    MapShape::new(s.height / p.window, s.width / p.window, s.channels)
                }
                LayerSpec::DenseSvgp(d) => {
                    positive("inducing", d.inducing)?;
                    positive("outputs", d.outputs)?;
                    check_kernel_init(i, &d.kernel)?;
                    MapShape::dense(d.outputs)
                }
                LayerSpec::DenseDistGp(d) => {
                    positive("inducing", d.inducing)?;
                    positive("channels_out", d.channels_out)?;
                    check_kernel_init(i, &d.kernel)?;
                    MapShape::dense(d.channels_out)
                }
            };
            out.push(s);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Shape entering layer `i`.
    pub fn input_shape(&self, i: usize) -> Result<MapShape> {
        Ok(if i == 0 { self.input } else { self.shapes()?[i - 1] })
    }

    pub fn output_shape(&self) -> Result<MapShape> {
        Ok(*self.shapes()?.last().expect("validated nonempty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_like() -> NetworkSpec {
        NetworkSpec::from_json(
            r#"{
              "input": {"height": 28, "width": 28, "channels": 1},
              "layers": [
                {"type": "conv_svgp", "kernel_size": 5, "stride": 2, "inducing": 50, "channels_out": 8},
                {"type": "affine_conv", "kernel_size": 3, "channels_out": 4, "lipschitz_normalized": true},
                {"type": "distgp_activation", "inducing": 20, "channels_out": 4},
                {"type": "barycentre_pool", "window": 2},
                {"type": "dense_distgp", "inducing": 20, "channels_out": 10}
              ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let s = mnist_like().shapes().unwrap();
        assert_eq!(s[0], MapShape::new(12, 12, 8));
        assert_eq!(s[1], MapShape::new(10, 10, 4));
        assert_eq!(s[2], MapShape::new(10, 10, 4));
        assert_eq!(s[3], MapShape::new(5, 5, 4));
        assert_eq!(s[4], MapShape::dense(10));
        assert_eq!(conv_output_size(5, 3, 2, 1), Some(2));
        assert_eq!(conv_output_size(7, 3, 1, 2), Some(3));
        assert_eq!(conv_output_size(2, 3, 1, 1), None);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = mnist_like();
        s.layers.swap(0, 1);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));

        let mut s = mnist_like();
        s.layers.push(LayerSpec::DenseSvgp(DenseSvgpSpec {
            inducing: 3,
            outputs: 1,
            mean_function: MeanFunction::Zero,
            kernel: KernelInit::default(),
        }));
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));

        let mut s = mnist_like();
        s.layers[3] = LayerSpec::BarycentrePool(PoolSpec { window: 3, weights: None });
        assert!(matches!(s.validate(), Err(Error::DimensionMismatch(_))));

        let mut s = mnist_like();
        s.layers[0] = LayerSpec::ConvSvgp(ConvSvgpSpec {
            kernel_size: 30,
            stride: 1,
            inducing: 2,
            channels_out: 1,
            mean_function: MeanFunction::Zero,
            kernel: KernelInit::default(),
        });
        assert!(matches!(s.validate(), Err(Error::DimensionMismatch(_))));

        let empty = NetworkSpec { input: MapShape::dense(1), layers: vec![] };
        assert!(empty.validate().is_err());

        let bad_pool = PoolSpec { window: 2, weights: Some(vec![0.5, 0.5, 0.5, -0.5]) };
        assert!(pool_weights(&bad_pool).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"input": {"height": 1, "width": 1, "channels": 1},
            "layers": [{"type": "dense_svgp", "inducing": 3, "outputs": 1, "bogus": 1}]}"#;
        assert!(NetworkSpec::from_json(text).is_err());
        let text = r#"{"input": {"height": 1, "width": 1, "channels": 1},
            "layers": [{"type": "dense_svgp", "inducing": 3, "outputs": 1}]}"#;
        assert!(NetworkSpec::from_json(text).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let s = mnist_like();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(NetworkSpec::from_json(&text).unwrap(), s);
    }
}
