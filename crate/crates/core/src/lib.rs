//! Multi-view stereo depth fusion.
//!
//! Depth from a moving monocular camera is recovered per frame from
//! plane-sweep cost volumes, but independent per-frame estimates flicker.
//! This crate treats the per-frame latent encodings as noisy observations of
//! a function over camera poses and smooths them with a Gaussian process
//! whose kernel acts on a pose distance (translation plus rotation). The
//! posterior can be computed jointly over a trajectory ([`batch`]) or
//! frame-by-frame at constant cost per step ([`online`]); on additive-
//! distance trajectories the two agree at the newest frame.
//!
//! The numeric core is generic over the scalar type through [`Real`]
//! (`f32` or `f64`); the pipeline and file formats are fixed to `f64`
//! in memory and single precision on disk.

pub mod batch;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod online;
pub mod pipeline;
pub mod pose;
pub mod scalar;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete aliases for the common double-precision instantiation.
pub type PoseF64 = pose::Pose<f64>;
pub type RelativePoseF64 = pose::RelativePose<f64>;
pub type KernelSpecF64 = kernels::KernelSpec<f64>;
pub type GramMatrixF64 = kernels::GramMatrix<f64>;
pub type LatentMatrixF64 = batch::LatentMatrix<f64>;
pub type BatchPosteriorF64 = batch::BatchPosterior<f64>;
pub type OnlineStateF64 = online::OnlineState<f64>;
pub type IntrinsicsF64 = sweep::Intrinsics<f64>;
pub type ImageTensorF64 = sweep::ImageTensor<f64>;
pub type CostVolumeF64 = sweep::CostVolume<f64>;
pub type DepthMapF64 = metrics::DepthMap<f64>;
pub type MetricsReportF64 = metrics::MetricsReport<f64>;

/// Single-precision aliases for the pose and kernel layer.
pub type PoseF32 = pose::Pose<f32>;
pub type KernelSpecF32 = kernels::KernelSpec<f32>;
pub type OnlineStateF32 = online::OnlineState<f32>;
