//! Multi-encoder volumetric segmentation of multi-modal brain MRI.
//!
//! Four modality-specific encoders (FLAIR, T1, T1-CE, T2) feed per-stage
//! fused feature maps into one decoder that predicts four tissue classes.
//! The crate carries everything needed to train and evaluate such a network
//! on a desktop CPU:
//!
//! - [`tensor`]: dense tensors and 3-D convolution primitives,
//! - [`autodiff`]: tape-based reverse-mode differentiation and gradient checks,
//! - [`model`]: the network, its parameters and checkpoints,
//! - [`loss`]: Dice-family losses,
//! - [`data`]: NIfTI-1 I/O, normalization, one-hot labels, patch tiling and
//!   synthetic phantoms,
//! - [`metrics`]: Dice, sensitivity, specificity and Hausdorff95 over the
//!   ET/WT/TC regions,
//! - [`train`]: learning-rate schedule, Adam, training, prediction and
//!   evaluation drivers.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Mode, Tensor};
