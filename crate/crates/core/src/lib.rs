//! Humanoid animation synthesis with a spatiotemporally conditioned GAN.
//!
//! The pipeline: BVH motion data is parsed into quaternion pose sequences,
//! compressed frame-by-frame with a sparse autoencoder, and fed to an
//! LSTM generator whose output a graph-convolutional discriminator judges
//! against real motion. A conditioning loss over the "main joints" of the
//! input ties the generated sequence to the input's spatial trajectories
//! and velocities.

pub mod augment;
pub mod bvh;
pub mod codec;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod math;
pub mod motion;
pub mod ndl;
pub mod selfcheck;
pub mod skeleton;
pub mod stnbnn;
pub mod train;

pub use error::{Error, Result};
