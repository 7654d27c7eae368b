//! Contact-gated tactile fusion for a small vision-language-action policy,
//! with a deterministic 2D contact simulator and benchmark harness.

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod modality;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tactile;
pub mod train;

pub use error::{CoreError, Result};
