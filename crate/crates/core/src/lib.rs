//! Regional-attention shadow removal: attention operators, the encoder-decoder
//! network, losses and metrics, synthetic data, and training.

pub mod attention;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
