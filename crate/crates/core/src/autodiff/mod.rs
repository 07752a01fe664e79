//! Dense tensors, the convolution/activation/loss kernels DRCN needs, and a
//! tape for reverse-mode differentiation.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use ops::{add, conv2d_same, mse_loss, relu, weighted_sum, ConvLayer};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Scalar, Shape, Tensor};
