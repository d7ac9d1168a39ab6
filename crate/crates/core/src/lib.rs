//! Volumetric multi-atlas segmentation.
//!
//! The pipeline registers atlas members to a target (affine followed by a cubic
//! B-spline free-form deformation, driven by Parzen-window mutual information
//! and stochastic gradient descent), averages the deformed members into a
//! probabilistic atlas, and segments the target by label fusion, Bayesian MAP
//! classification against per-class intensity histograms, EM Gaussian-mixture
//! fitting, or the product of the latter two.
//!
//! Numeric types are generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, which is what the I/O layer and the CLI use.

pub mod atlas;
pub mod bayes;
pub mod bspline;
pub mod em;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod scalar;
pub mod seed;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;
pub use volume::{ClassMap, Grid, Interpolator, LabelVolume};

pub type ScalarVolume = volume::Volume<f64>;
pub type ScalarVolumeF32 = volume::Volume<f32>;
pub type AffineTransform = transform::AffineTransform<f64>;
pub type FfdTransform = transform::FfdTransform<f64>;
pub type TransformChain = transform::TransformChain<f64>;
pub type ProbabilisticAtlas = atlas::ProbabilisticAtlas<f64>;
pub type AtlasMember = atlas::AtlasMember<f64>;
pub type TissueModel = bayes::TissueModel<f64>;
pub type PosteriorField = bayes::PosteriorField<f64>;
pub type GmmState = em::GmmState<f64>;
