//! Stair line detection on a coarse cell grid.

pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
