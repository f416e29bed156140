//! GVTNet: a window-attention super-resolution transformer whose graph layers
//! mask attention with a Minkowski-distance adjacency between window tokens.

pub mod adjacency;
pub mod attention;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use model::{GvtNet, NetConfig};
pub use numerics::{Tape, Tensor, Var};
