pub mod checkpoint;
pub mod checks;
pub mod collision;
pub mod config;
pub mod direct;
pub mod expansion;
pub mod error;
pub mod fluid;
pub mod harness;
pub mod hierarchy;
pub mod knudsen;
pub mod numerics;
pub mod prandtl;
pub mod velocity;

pub use error::{Error, Result};
