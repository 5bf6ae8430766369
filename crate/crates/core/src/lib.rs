//! Unsupervised outlier arbitration for augmented positive views.

pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod mselab;
pub mod rng;
pub mod synthworld;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
