//! Learning-based navigation control for differential-drive robots.

pub mod dynamics;
pub mod error;
pub mod lifting;
pub mod linalg;

pub use dynamics::{Control, PerturbationSample, PerturbationSpec, ResampleMode, State, Trajectory};
pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
