//! Watermarking for 3D Gaussian Splatting: a residual embedding network with
//! adaptive marker perturbation writes a bit string into a Gaussian cloud in
//! one forward pass; a convolutional decoder recovers it from renders taken
//! under arbitrary cameras and distortions.
//!
//! Everything numeric is generic over the scalar type ([`Real`]): f32 is the
//! training default, f64 backs the gradient checks and tight-tolerance tests.

pub mod amc;
pub mod checkpoint;
pub mod camera;
pub mod cloud;
pub mod decoder;
pub mod distortion;
pub mod embedder;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod metrics;
pub mod ply;
pub mod render;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use splatmark_autograd::{real, Real, Tape, Tensor, Var};

pub type Cloud32 = cloud::GaussianCloud<f32>;
pub type Cloud64 = cloud::GaussianCloud<f64>;
pub type Camera32 = camera::Camera<f32>;
pub type Camera64 = camera::Camera<f64>;
pub type Image32 = image::RenderedImage<f32>;
pub type Image64 = image::RenderedImage<f64>;
