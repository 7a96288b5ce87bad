//! Exposure-correction GAN toolkit: a small reverse-mode tensor library, the
//! generator and multi-scale discriminator, their training losses, and the
//! image-quality and matting evaluation used to score them.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Real, Tape, Tensor, Var};
