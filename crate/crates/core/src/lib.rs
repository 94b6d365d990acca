//! Multiscale splitting solvers for high-contrast parabolic diffusion.

pub mod assembly;
pub mod cem;
pub mod coarse;
pub mod complement;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fine;
pub mod linalg;
pub mod mesh;
pub mod plot;
pub mod splitting;

pub use error::{Error, Result};
pub use nalgebra;
