//! Shortcut-routing capsule networks.

pub mod caps;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
