//! Symmetry cloning.
//!
//! Unconstrained "block MLP" layers are regressed onto equivariant convolution
//! layers (translation convolution, C4 lifting and group convolution) using random
//! inputs and random kernels, then reused as feature extractors for symmetric and
//! symmetry-breaking image classification.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`param`], [`optim`], [`rng`]: numeric substrate
//! - [`groups`], [`spatial`]: T(2) and C4 actions, index maps
//! - [`layers`]: teacher layers and reference classifiers
//! - [`agnostic`]: block-MLP students and the plain MLP
//! - [`cloning`]: the cloning loop
//! - [`downstream`]: benchmark tasks, freeze/unfreeze training, KL penalty
//! - [`metrics`]: equivariance error, Toeplitz oracle, feature-map export
//! - [`data`]: IDX loading, splits, checkpoints, run configuration

pub mod agnostic;
pub mod autodiff;
pub mod cloning;
pub mod data;
pub mod downstream;
pub mod error;
pub mod groups;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod spatial;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use groups::{C4Element, GroupElement, PaddingMode, T2Element};
pub use param::{Module, Parameter};
pub use rng::SeededRng;
pub use tensor::{DType, Scalar, Tensor};

#[cfg(any(test, feature = "oracles"))]
#[doc(hidden)]
pub mod oracle;
