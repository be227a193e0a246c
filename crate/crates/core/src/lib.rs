pub mod context;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
