//! A small reverse-mode differentiation engine with exactly the operations the
//! segmentation and deformation networks need, plus Adam and checkpoints.
//!
//! Computation is recorded on a [`Tape`]. Parameters are bound onto the tape
//! as trainable or frozen leaves; frozen leaves never receive gradients.

mod adam;
mod checkpoint;
pub(crate) mod conv;
mod params;
mod tape;
mod tensor;
pub(crate) mod warp;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use conv::ConvGeom;
pub use params::{Param, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
