pub mod completion;
pub mod compress;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{Error, Result};
