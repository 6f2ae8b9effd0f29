//! Layered motion fusion: a three-layer dynamic radiance field (static,
//! semi-static, and camera-attached dynamic) trained with uncertainty-weighted
//! photometric loss plus positive and negative motion fusion of 2D
//! pseudo-masks, with test-time refinement and segmentation evaluation.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod renderer;
pub mod scenegen;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use fields::{eval_layers, parameter_partition, FieldConfig, Layer, LayeredFieldParams};
pub use geometry::{Aabb, CameraPose, Intrinsics, Ray, Vec3};
pub use image::{BinaryMask, GrayImage, RgbImage};
pub use scenegen::{generate_scene, render_ground_truth, GroundTruth, SceneConfig, SceneSpec};
