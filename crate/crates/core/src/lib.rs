pub mod agent;
pub mod data;
pub mod envs;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod nn;
pub mod pipeline;
pub mod verify;

pub use error::{Error, Result};
