pub mod autograd;
pub mod encoder;
pub mod error;
pub mod mst;
pub mod nn;
pub mod replay;
pub mod sac;
pub mod scene;
pub mod sim;
pub mod slt;
pub mod train;

pub use error::{Error, Result};
