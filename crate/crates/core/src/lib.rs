//! Contour-integration benchmark toolkit.
//!
//! * [`autodiff`], [`optim`], [`init`], [`checkpoint`]: dense NHWC tensors,
//!   reverse-mode gradients, Adam, variance-scaling init, parameter files.
//! * [`v1net`]: the V1Net recurrent cell with excitatory, subtractive and
//!   divisive horizontal connections.
//! * [`zoo`]: feedforward, atrous and recurrent comparison models built on a
//!   shared input / intermediate / readout layout.
//! * [`stimulus`]: MarkedLong and PathFinder stimulus synthesis.
//! * [`harness`]: training, evaluation, metrics and transfer fine-tuning.
//! * [`interpret`]: activation dumps and horizontal-kernel PCA.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod init;
pub mod interpret;
pub mod optim;
pub mod seed;
pub mod stimulus;
pub mod tensor;
pub mod v1net;
pub mod zoo;

pub use autodiff::{Conv2dCfg, Gradients, Graph, Padding, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
