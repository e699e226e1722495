pub mod animator;
pub mod error;
pub mod eval;
pub mod expr_vae;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod pipeline;

pub use error::{Error, Result};
