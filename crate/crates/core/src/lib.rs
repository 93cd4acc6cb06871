pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradients;
pub mod kernels;
pub mod likelihoods;
pub mod net;
pub mod numerics;
pub mod ood;
pub mod svgp;
pub mod training;

pub use error::{Error, Result};
