//! Language embedded radiance fields on the CPU.

pub mod checkpoint;
pub mod error;
pub mod field;
pub mod fixture;
pub mod provider;
pub mod pyramid;
pub mod query;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
