//! DistGP layer stacks: a convolved (or dense) SVGP first layer followed
//! by affine moment convolutions, W2-kernel GP activations and
//! barycentric pooling, plus Lipschitz audits, the feature-collapse
//! diagnostic and checkpointing.

pub mod checkpoint;
pub mod collapse;
pub mod layers;
pub mod lipschitz;
pub mod model;
pub mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use collapse::{collapse_check, CollapseLayer, CollapseReport};
pub use layers::{
    affine_moment_conv, barycentre_pool, conv_svgp_forward, distgp_activation, normalize_affine, AffineOperator,
    ConvSvgpLayer, DistGpLayer, MomentMap,
};
pub use lipschitz::{
    audit_affine, audit_distgp, lipschitz_bound_affine, lipschitz_bound_distgp, AuditReport, DistGpBound,
};
pub use model::{DistGpNet, LayerState, NetOutput};
pub use spec::{LayerSpec, MapShape, MeanFunction, NetworkSpec};
