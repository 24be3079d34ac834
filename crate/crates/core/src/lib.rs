//! Gated adaptive positional encoding laboratory.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod gape;
pub mod model;
pub mod niah;
pub mod numerics;
pub mod posenc;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
