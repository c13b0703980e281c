//! Shallow image representations and the shared classification harness.
//!
//! The crate covers dense local descriptors (RootSIFT and local colour
//! statistics), PCA decorrelation, diagonal-covariance GMM vocabularies,
//! (improved) Fisher vector encoding with spatial pyramids or spatially
//! extended descriptors, crop/flip augmentation with feature fusion,
//! one-vs-rest linear SVMs and the ranking/classification metrics used to
//! compare representations.

pub mod augment;
pub mod descriptors;
mod error;
pub mod eval;
pub mod feature;
pub mod fisher;
pub mod gmm;
pub mod image;
pub mod reduce;
pub mod svm;

pub use error::{Error, Result};
pub use feature::FeatureVector;
pub use image::{ColorSpace, RasterImage};
