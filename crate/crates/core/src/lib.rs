//! Limited-angle CT reconstruction by sinogram inpainting.
//!
//! The crate is organised by stage:
//!
//! - [`tomo`]: parallel-beam projector pair, filtered back-projection, angle masks, phantoms.
//! - [`diffusion`]: mean-reverting noise schedule, transition kernels, reverse SDE/ODE steps.
//! - [`nn`]: small dilated convolutional networks with hand-written reverse-mode gradients.
//! - [`pipeline`]: score training, teacher pairs, one-step distillation, ensembles, refinement.
//! - [`eval`]: metrics, TV baseline, comparison and ablation tables.
//! - [`workbench`]: tensor container, run configuration, PGM export and the CLI commands.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tomo;
pub mod workbench;

pub use error::{Error, Result};
