//! Deformable multi-modal registration trained through mono-modal cycles.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] and [`io`]: volumes, label maps, NIfTI-1 and `.rvol` files;
//! * [`autodiff`]: reverse-mode differentiation over dense grid primitives;
//! * [`transform`]: displacement fields, warping, composition, Jacobians;
//! * [`objectives`]: similarity metrics, regularizers and composite losses;
//! * [`model`]: displacement predictors and checkpoints;
//! * [`synth`]: procedural bi-modal subjects with ground-truth warps;
//! * [`training`]: sampling, optimizer and training loops;
//! * [`eval`]: Dice, folding statistics and training diagnostics.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
