//! Sufficient conditions for hidden representations of a DistGP stack to
//! contract to constants.
//!
//! For every DistGP layer `l` the embedding `W_l` is the weight matrix of
//! the affine layer right before it (identity when there is none), `m_l`
//! its output width, `D_{l−1}` its input width and `D_l` the GP output
//! width. With `⟨W̃, W̃⟩ = ‖W_l‖²_F / m_l²` two forms are reported:
//!
//! * statement form: `D_l² ⟨W̃, W̃⟩ ≤ 1`, last layer
//!   `D_L ⟨W̃, W̃⟩ + σ²_L / (2 l²_L) ≤ 1`;
//! * remark form: `D_l m_{l−1} D_{l−1} ⟨W̃, W̃⟩ ≤ 1`, last layer
//!   `m_L D_{L−1} ⟨W̃, W̃⟩ + σ²_L / (2 l²_L) ≤ 1`, with `m_0 = D_0`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::DenseMatrix;

use super::model::{DistGpNet, LayerParams};
use super::spec::LayerSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseLayer {
    /// Index of the DistGP layer in the network.
    pub layer: usize,
    pub width_in: usize,
    pub affine_width: usize,
    pub width_out: usize,
    /// `⟨W̃, W̃⟩`.
    pub weight_inner: f64,
    pub statement_lhs: f64,
    pub remark_lhs: f64,
    pub is_last: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub layers: Vec<CollapseLayer>,
    /// Every statement-form inequality holds.
    pub collapse_prone: bool,
    /// Every remark-form inequality holds.
    pub collapse_prone_remark: bool,
}

pub fn collapse_check(net: &DistGpNet) -> Result<CollapseReport> {
    let spec = net.spec();
    let last_gp = *net.gp_layers().last().expect("first layer is a GP");
    let mut layers = Vec::new();
    let mut width = spec.input.channels;
    let mut prev_m = 0usize;
    let mut pending: Option<DenseMatrix> = None;
    for (i, (ls, lp)) in spec.layers.iter().zip(net.layer_params()).enumerate() {
        match (ls, lp) {
            (LayerSpec::ConvSvgp(c), _) => {
                width = c.channels_out;
                prev_m = width;
            }
            (LayerSpec::DenseSvgp(c), _) => {
                width = c.outputs;
                prev_m = width;
            }
            (LayerSpec::AffineConv(a), LayerParams::Affine { weights }) => {
                pending = Some(net.params().value(*weights));
                width = a.channels_out;
            }
            (LayerSpec::DistGpActivation(c) | LayerSpec::DenseDistGp(c), _) => {
                let input_width = if matches!(ls, LayerSpec::DenseDistGp(_)) {
                    net.shapes()[i - 1].volume()
                } else {
                    width
                };
                let w = pending.take().unwrap_or_else(|| DenseMatrix::identity(input_width));
                let (d_prev, m_l, d_l) = (w.rows() as f64, w.cols() as f64, c.channels_out as f64);
                let inner = w.data().iter().map(|x| x * x).sum::<f64>() / (m_l * m_l);
                let is_last = i == last_gp;
                let (statement, remark) = if is_last {
                    let k = net.kernel(i)?;
                    let l2 = k.lengthscales.iter().copied().fold(f64::INFINITY, f64::min);
                    let tail = k.variance / (2.0 * l2);
                    (d_l * inner + tail, m_l * d_prev * inner + tail)
                } else {
                    (d_l * d_l * inner, d_l * prev_m as f64 * d_prev * inner)
                };
                layers.push(CollapseLayer {
                    layer: i,
                    width_in: w.rows(),
                    affine_width: w.cols(),
                    width_out: c.channels_out,
                    weight_inner: inner,
                    statement_lhs: statement,
                    remark_lhs: remark,
                    is_last,
                });
                prev_m = w.cols();
                width = c.channels_out;
            }
            _ => {}
        }
    }
    Ok(CollapseReport {
        collapse_prone: layers.iter().all(|l| l.statement_lhs <= 1.0),
        collapse_prone_remark: layers.iter().all(|l| l.remark_lhs <= 1.0),
        layers,
    })
}
