//! Context-aware decomposed attention (CADA) layers, ResNet backbones built from them,
//! a small training loop and the analysis tools used to study the learned filters.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod canet;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lowpass;
pub mod nn;
pub mod ops;
pub mod reference;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
