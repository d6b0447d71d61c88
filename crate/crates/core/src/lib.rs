pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod data;
pub mod encoders;
pub mod mcrl;
pub mod eval;
pub mod pipeline;
