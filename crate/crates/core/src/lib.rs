//! Ensemble learning over transfer-learned and contrastively pre-trained
//! image encoders.
//!
//! The pipeline trains several small convolutional encoders, fuses the
//! features they extract (concatenation followed by FastICA by default),
//! fits five classical classifiers on the fused features and combines them
//! by majority vote. Grad-CAM, SHAP and t-SNE tooling audits the result.
//!
//! The dense linear algebra and feature-fusion layers are generic over the
//! scalar type ([`Real`]); the network core and the classical learners run in
//! `f64`.

pub mod classifiers;
pub mod codec;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};
pub use linalg::Real;

/// Row-major dense matrix in double precision.
pub type Matrix = linalg::Matrix<f64>;
/// Single-precision matrix, for callers that only need fusion/linalg.
pub type Matrix32 = linalg::Matrix<f32>;
/// Feature matrix with labels and sample ids, double precision.
pub type FeatureMatrix = fusion::FeatureMatrix<f64>;
/// Fitted fusion transform, double precision.
pub type FusionTransform = fusion::FusionTransform<f64>;
pub type EigenDecomposition = linalg::EigenDecomposition<f64>;
