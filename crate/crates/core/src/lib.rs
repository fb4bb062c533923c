//! Basis-projected layer (BPL) for pattern-sparse data.
//!
//! The layer projects every data element (one F-dimensional spectrum) onto N
//! learnable bases whose norms are clamped to the unit ball, producing one
//! dense coefficient per basis. Around it sits everything needed to train
//! and evaluate it on GC-MS-like spectra:
//!
//! * [`linalg`]: dense matrices, truncated SVD, NMF and 2-D PCA.
//! * [`bpl`]: the layer itself, its analytic gradient and initializers.
//! * [`nn`]: front layers, the residual 1d-CNN classifier and its loss.
//! * [`optim`]: Adam and cosine annealing.
//! * [`data`]: spectra datasets, the synthetic generator and the on-disk format.
//! * [`metrics`]: multi-label F1 and basis embedding export.

pub mod bpl;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
