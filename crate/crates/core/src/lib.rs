pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
#[cfg(feature = "io")]
pub mod harness;
pub mod image;
#[cfg(feature = "io")]
pub mod io;
pub mod layout;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod msfb;
pub mod nn;
pub mod priors;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
