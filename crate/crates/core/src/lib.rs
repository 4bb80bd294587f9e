//! Hybrid CNN + dynamic-MLP unrolled reconstruction for sub-sampled
//! multi-coil MRI: acquisition simulation, SENSE encoding, a dynamic MLP
//! operator that accepts arbitrary image sizes, hand-derived backpropagation,
//! desk-scale training and SSIM/PSNR evaluation.
//!
//! Everything numerical is generic over the scalar type via [`scalar::Real`]
//! (`f32` for runtime, `f64` for gradient checks); the crate root exposes
//! concrete aliases for the common case.

pub mod cascade;
pub mod checkpoint;
pub mod dmlp;
pub mod fourier;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod sim;
pub mod train;
pub mod volume;

pub use scalar::{Cplx, Real, ScalarKind};
pub use volume::{Axis, ChannelVolume, ComplexVolume, Dims, MultiCoilImage, PatchMatrix, RealVolume};

pub type ComplexVolume32 = volume::ComplexVolume<f32>;
pub type ComplexVolume64 = volume::ComplexVolume<f64>;
pub type ChannelVolume32 = volume::ChannelVolume<f32>;
pub type ChannelVolume64 = volume::ChannelVolume<f64>;
pub type RealVolume32 = volume::RealVolume<f32>;
pub type RealVolume64 = volume::RealVolume<f64>;
pub type CoilSensitivities32 = fourier::CoilSensitivities<f32>;
pub type CoilSensitivities64 = fourier::CoilSensitivities<f64>;
pub type MultiCoilKSpace32 = fourier::MultiCoilKSpace<f32>;
pub type MultiCoilKSpace64 = fourier::MultiCoilKSpace<f64>;
