//! Minimal deterministic dense-tensor engine.
//!
//! Everything is 64-bit float and row-major. Forward computations are
//! recorded on a [`Tape`]; [`Tape::backward`] replays them in reverse to
//! produce exact gradients, which are accumulated into a [`ParamStore`] and
//! consumed by [`AdamW`]. [`finite_diff_check`] verifies any scalar loss
//! built on the tape against central differences.
//!
//! Kernels that are row-partitionable run on rayon when the `parallel`
//! feature is enabled. Each output row is produced by exactly one task with
//! the same summation order as the sequential path, so both paths are
//! bit-identical.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled};
pub use optim::{plateau_step, AdamW, AdamWConfig, Plateau, PlateauConfig};
pub use par::Execution;
pub use params::{LrGroup, Param, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
