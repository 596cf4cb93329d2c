//! Modular encoder/decoder/classifier networks for profiled side-channel
//! analysis.
//!
//! The crate provides:
//! - a small reverse-mode differentiation engine with the 1-D layer
//!   vocabulary these networks need ([`ops`], [`tape`]),
//! - module graphs assembled into a jointly trained network with a weighted
//!   cross-entropy + reconstruction loss ([`module`], [`network`], [`train`]),
//! - guessing-entropy evaluation and GE-based early stopping ([`sca`]),
//! - synthetic leakage-trace generation ([`forge`]),
//! - similarity analysis between trained classifiers ([`introspect`]),
//! - binary containers for traces and modules ([`format`]).

pub mod error;
pub mod forge;
pub mod format;
pub mod sca;
pub mod introspect;
pub mod layer;
pub mod module;
pub mod network;
pub mod optim;
pub mod presets;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamId, Parameter, Tensor};
