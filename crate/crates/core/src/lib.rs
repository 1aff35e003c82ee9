//! Two-stage detector for sandwich-attack accounts on Ethereum-style
//! transaction histories.
//!
//! Stage one trains a calibrated RBF support vector machine on per-account
//! gas and timing features. Stage two links accounts whose stage-one
//! probabilities and features agree, then classifies the resulting graph
//! with a graph attention network.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod cli;
pub mod features;
pub mod gat;
pub mod metrics;
pub mod netgraph;
pub mod pipeline;
pub mod scalar;
pub mod seeds;
pub mod svm;
pub mod synth;
pub mod txmodel;

pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;
pub type FeatureVectorF64 = features::FeatureVector<Real>;
pub type SvmModelF64 = svm::SvmModel<Real>;
pub type GatModelF64 = gat::GatModel<Real>;
pub type AccountGraphF64 = netgraph::AccountGraph<Real>;
