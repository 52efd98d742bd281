//! Densely connected CNN engine for slice-based classification of labeled
//! 3-D volumes.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`ops`]: NCHW tensors and differentiable primitives with
//!   analytic backward passes; [`gradcheck`] verifies them numerically.
//! - [`graph`] and [`zoo`]: layer graphs, the dense network and a plain CNN
//!   baseline; [`checkpoint`] persists them.
//! - [`data`]: volume files, slice extraction, augmentation and a synthetic
//!   phantom generator.
//! - [`train`]: class-balanced training and patient-level aggregation.
//! - [`saliency`]: guided and vanilla gradient maps.
//! - [`eval`]: stratified patient-level cross-validation.
//!
//! Training runs in `f32`; every generic type also works in `f64`, which is
//! what the gradient checks use.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod runtime;
pub mod saliency;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{LayerGraph, NodeId};
pub use ops::Mode;
pub use tensor::{Real, Tensor};
pub use zoo::{Architecture, DenseNetSpec, ModelKind};
