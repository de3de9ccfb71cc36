//! Simulation and analysis core: tissue phantoms, the interleaved
//! IR / T2prep / multi-echo sequence, k-space sampling geometry,
//! quantitative mapping and evaluation metrics.

pub mod dipole;
pub mod error;
pub mod fft;
pub mod io;
pub mod mapping;
pub mod metrics;
pub mod phantom;
pub mod sampling;
pub mod seqsim;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Dims3;
