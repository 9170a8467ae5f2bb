pub mod autograd;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod wavelet;

pub use error::{FddmError, Result};
