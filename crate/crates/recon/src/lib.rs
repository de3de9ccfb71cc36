//! Multi-coil multi-contrast reconstruction: encoding model, learned sampling
//! masks, unrolled ADMM network and two-phase joint training.

pub mod admm;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod forward;
pub mod mask;
pub mod network;
pub mod training;

pub use error::{Error, Result};
