//! Dense depth estimation from a monocular RGB image and sparse, noisy radar
//! returns.
//!
//! The pipeline projects radar and LiDAR points into sparse depth maps,
//! predicts a coarse dense map with a late-fusion encoder-decoder, rejects
//! radar returns that disagree with the coarse map by more than a
//! depth-adaptive tolerance, and refines with a second late-fusion network.

pub mod datamodel;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod network;
pub mod objective;
pub mod projection;
pub mod training;

pub use error::{Error, Result};
