//! Spectral bias of untrained convolutional generators.
//!
//! The crate fits the two-layer generator `G(C) = relu(U C) v` (and a small
//! one-dimensional deep decoder) to signals by plain gradient descent, and
//! predicts those fits in closed form from the trigonometric basis and the
//! dual kernel of the convolution filter.

pub mod decoder;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod jacobian;
pub mod linalg;
pub mod rng;
pub mod spectral;
pub mod trace;

pub use decoder::{DecoderConfig, DecoderState, Variant};
pub use error::{Error, Result};
pub use generator::{GeneratorConfig, GeneratorState, StoppingRule};
pub use jacobian::{Differentiable, SigmaMatrix};
pub use spectral::{CirculantOperator, DualKernel, Kernel, KernelPreset, TrigBasis};
pub use trace::{FitRecord, FitTrace, GdConfig};
