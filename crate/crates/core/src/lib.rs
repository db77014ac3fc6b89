pub mod error;
pub mod infoplane;
pub mod trainer;
pub mod codec;
pub mod comms;
pub mod nn;
pub mod sparsify;

pub use error::{Error, Result};
