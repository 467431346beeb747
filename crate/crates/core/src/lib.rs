//! One-shot unsupervised domain adaptation by learned, target-styled
//! augmentation of source images.

pub mod alignment;
pub mod augmentation;
pub mod autograd;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
