//! Score-guided adversarial diffusion sampling at desk scale.

pub mod aege;
pub mod atns;
pub mod attack;
pub mod autodiff;
pub mod dataset;
pub mod defenses;
pub mod diffusion;
pub mod encoders;
pub mod experiment;
pub mod nn;
pub mod error;
pub mod gcmg;
pub mod io;
pub mod metrics;
pub mod scalar;
pub mod tensor;

pub use autodiff::{finite_diff_check, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
