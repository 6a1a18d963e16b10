//! Unified voxel-space 3D object detection for cameras and LiDAR.
//!
//! Camera feature maps are lifted into a metric voxel grid through a
//! predicted per-pixel depth distribution, point clouds are voxelized into a
//! grid of the same shape, and a transformer decoder with 3D deformable
//! attention reads objects out of the fused volume. Everything is built on a
//! small reverse-mode tensor engine in [`numerics`] so each stage can be
//! gradient-checked.

pub mod augmentation;
pub mod cross_modality;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod modality_spaces;
pub mod numerics;
pub mod pipeline;
pub mod postprocess;
pub mod scene;
pub mod training;

pub use error::{Error, Result, StageContext};

/// Scalar type of the detection stack.
pub type Real = f64;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type Calibration = geometry::CameraCalibration<Real>;
pub type GridSpec = geometry::VoxelGridSpec<Real>;
pub type Pose = geometry::EgoPose<Real>;

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Generator for `seed` on an independent `stream`, so separate consumers
/// of one seed never share random draws.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
