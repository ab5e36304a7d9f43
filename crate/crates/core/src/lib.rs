//! Set-based adversarial training on a small reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`], [`autodiff`] | dense `f64` tensors and the define-by-run tape |
//! | [`nn`], [`checkpoint`] | dense, maxout and batch-norm layers, Adam, JSON checkpoints |
//! | [`histogram`] | differentiable soft histograms |
//! | [`discriminator`] | the pairwise set discriminator and the vanilla, packed and minibatch-discrimination baselines |
//! | [`training`] | generator, losses, set sampling, the alternating training loop |
//! | [`metrics`] | partition-tree binning distance, Haar analysis, inception-style scores, Fréchet distance |

pub mod autodiff;
pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod gradcheck;
pub mod histogram;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
