//! Multi-branch adversarial self-distillation.
//!
//! A primary convolutional stream grows `K` auxiliary classifier heads.
//! All `K + 1` classifiers are trained together with cross-entropy,
//! pairwise KL distillation, similarity-map distillation and a Wasserstein
//! critic that scores each classifier's output against a mixture of the
//! ensemble prediction and the label.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
