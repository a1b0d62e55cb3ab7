//! Visual item-promotion attacks against visually-aware recommenders.

pub mod attack;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod recsys;
pub mod rng;
pub mod visual;

pub use error::{Error, Result};
