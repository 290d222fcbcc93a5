//! Score-based diffusion generation of molecular dynamics trajectories.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: conformations, trajectories, pair angles, ARMSE and the
//!   extended-XYZ trajectory format.
//! - [`basis`]: spherical Bessel functions, real spherical harmonics and the
//!   spherical Fourier-Bessel pair features.
//! - [`autodiff`]: a small matrix-valued reverse-mode tape.
//! - [`egt`]: the equivariant geometric Transformer score network.
//! - [`sde`]: the acceleration-conditioned forward diffusion and the
//!   denoising score-matching loss.
//! - [`sampler`]: predictor-corrector and probability-flow ODE samplers and
//!   frame-by-frame rollout.
//! - [`refmd`]: a reference classical MD engine used to manufacture
//!   ground-truth trajectories.
//! - [`train`]: datasets, the optimiser, the training loop and checkpoints.

pub mod autodiff;
pub mod basis;
pub mod egt;
pub mod error;
pub mod geometry;
pub mod refmd;
pub mod sampler;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Conformation, Trajectory, Vec3};
