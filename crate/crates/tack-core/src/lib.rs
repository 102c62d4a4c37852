//! Few-shot 3D keypoint tracking on synthetic multi-view scenes.
//!
//! The pipeline: procedural objects are rendered from a small camera rig
//! ([`scene`]), a conditioned detector is trained to reproduce Gaussian
//! keypoint heatmaps from a handful of annotated views ([`model`],
//! [`training`]), and detections from new views are fused into a 3D point by
//! robust subset triangulation ([`geometry`]). Everything is deterministic
//! given a seed; [`autodiff`] provides the reverse-mode engine the detector
//! trains on.

pub mod autodiff;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod scene;
pub mod training;
