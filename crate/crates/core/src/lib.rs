pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod masking;
pub mod pseudo_label;
pub mod rng;
pub mod teachers;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
