pub mod composer;
pub mod data;
pub mod dst;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod geometry;
pub mod gradcheck;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{Gradients, NormGuard, Tape, Var};
