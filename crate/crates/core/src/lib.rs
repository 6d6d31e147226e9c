pub mod checks;
pub mod datagen;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod hifidit;
pub mod image;
pub mod objective;
pub mod spectral;
pub mod trainer;
pub mod vocab;

pub use error::{HifiError, Result};
