//! Patch-based diffusion priors for linear inverse problems.
//!
//! A whole-image score is assembled from denoiser evaluations on
//! non-overlapping patches of a zero-padded canvas. The partition is
//! re-drawn at random every iteration so that patch seams never stay in
//! one place. The assembled prior plugs into annealed Langevin, DPS-style,
//! predictor-corrector and range-null-space samplers for CT, deblurring and
//! superresolution problems.

pub mod assemble;
pub mod baselines;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod image;
pub mod metrics;
pub mod operators;
pub mod pnm;
pub mod samplers;
pub mod scoremodel;

pub use error::{Error, Result};
pub use image::{Image, Shape};
