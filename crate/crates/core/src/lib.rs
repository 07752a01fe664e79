//! Deeply-recursive convolutional network (DRCN) for single-image
//! super-resolution: tensor core with reverse-mode differentiation, the
//! model, its training loop, the image degradation pipeline and PSNR/SSIM
//! evaluation.

pub mod autodiff;
pub mod cli;
pub mod error;
mod fsutil;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
