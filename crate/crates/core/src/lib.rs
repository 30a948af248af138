//! Multi-channel vision transformer with decoupled self-attention.

pub mod aggregation;
pub mod attention;
pub mod check;
pub mod complexity;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod layout;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
