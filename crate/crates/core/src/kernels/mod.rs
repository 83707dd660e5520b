//! Forward and backward kernels of the differentiable primitives. These
//! are plain functions over tensors; [`crate::autograd`] records them.

pub mod conv;
pub mod norm;
pub mod pool;

pub use conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGeom,
    ConvGrads, Padding,
};
pub use norm::{
    batchnorm_eval_backward, batchnorm_eval_forward, batchnorm_train_backward,
    batchnorm_train_forward, BatchNormSaved, BatchNormState,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward};
