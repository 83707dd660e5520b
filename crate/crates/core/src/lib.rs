//! Volumetric segmentation with small residual 3D U-Nets.
//!
//! The crate is self-contained: dense tensors with a reverse-mode tape,
//! the U-Net model family and its adversarial critic, 3-D augmentation,
//! volume resampling, segmentation metrics, a raw volume format with a
//! synthetic phantom generator, and the Adam training loop.

pub mod augment;
pub mod adversarial;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod tensor;
pub mod train;
pub mod util;
pub mod volume;

pub use autograd::{Gradients, Mode, Tape, Var};
pub use error::{Error, Result};
pub use kernels::{BatchNormState, ConvGeom, Padding};
pub use tensor::{Real, Tensor};
pub use nn::{build_model, Model, ModelConfig, Variant};
pub use volume::{Dims, MaskVolume, Volume};
