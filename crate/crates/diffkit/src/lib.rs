//! Minimal reverse-mode automatic differentiation over dense real and
//! complex arrays, with the operators needed for unrolled reconstruction
//! networks, learned sampling masks and an SSIM loss.

pub mod adam;
pub mod array;
pub mod cg;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ssim;

pub use adam::{AdamState, Bound, ParamStore};
pub use array::{Array, Data};
pub use cg::cg_solve;
pub use error::{Error, Result};
pub use graph::{CustomOp, Grads, Graph, Var};
