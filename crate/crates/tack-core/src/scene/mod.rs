//! Synthetic scene generation: procedural objects, software rendering, and
//! meta-batch assembly.
//!
//! A *task* is one 3D point on (or near) an object instance. A *meta-batch*
//! renders that object under L+1 correlated poses — L conditioning views plus
//! one held-out validation view — each with a Gaussian target heatmap at the
//! projected point and a segmentation mask. Everything downstream (training,
//! evaluation, tracking fixtures) consumes these batches.
//!
//! Determinism is load-bearing: a dataset is a pure function of (seed,
//! config). Batch workers derive independent RNG streams per batch index, so
//! the same bytes come out regardless of thread count.

pub mod batch;
pub mod dataset;
pub mod mesh;
pub mod raster;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Quat;

pub use batch::{
    augment_pad_crop, augment_view, build_meta_batch, generate_batch, generate_dataset,
    object_library, sample_near_object_rejection, sample_offsurface_point, sample_task,
    tracking_instant, TrackingInstant,
};
pub use dataset::{read_dataset, read_ppm, write_dataset, write_ppm};
pub use mesh::{make_object, sample_surface_point, Mesh, ObjectConfig};
pub use raster::render;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("no background point accepted within {0} proposals")]
    RejectionBudgetExceeded(usize),
    #[error("view resampling exhausted {0} attempts without an in-view projection")]
    FovBudgetExceeded(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
}

/// Rigid object pose: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Quat,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rot: Quat::identity(), trans: Vector3::zeros() }
    }

    pub fn new(rot: Quat, trans: Vector3<f64>) -> Self {
        Pose { rot, trans }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.rotate(p) + self.trans
    }

    /// Map a world point back into the object frame (inverse of [`apply`]).
    ///
    /// [`apply`]: Pose::apply
    pub fn invert(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.conjugate().rotate(&(p - self.trans))
    }
}

/// Planar RGB image, channels-first (3, h, w), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, SceneError> {
        if data.len() != 3 * width * height {
            return Err(SceneError::ShapeMismatch(format!(
                "image {width}x{height} wants {} floats, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let hw = width * height;
        let mut data = Vec::with_capacity(3 * hw);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(hw));
        }
        Image { width, height, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, channel: usize, u: usize, v: usize) -> f32 {
        self.data[channel * self.width * self.height + v * self.width + u]
    }

    pub fn set(&mut self, channel: usize, u: usize, v: usize, value: f32) {
        self.data[channel * self.width * self.height + v * self.width + u] = value;
    }

    /// View as a (3, h, w) tensor for the networks.
    pub fn to_tensor(&self) -> crate::autodiff::Tensor<f32> {
        crate::autodiff::Tensor::new(&[3, self.height, self.width], self.data.clone())
            .expect("image dims")
    }
}

/// One 3D keypoint task: a point in the object's local frame plus the base
/// orientation the pose sampler perturbs around.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointTask {
    pub object: usize,
    /// Task point in the object frame (meters).
    pub point: Vector3<f64>,
    pub on_surface: bool,
    pub base_rotation: Quat,
}

/// One rendered view of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    /// Gaussian target activations peaked at `pixel` (unnormalised).
    pub target: crate::heatmap::Heatmap,
    /// 1.0 where the task object is the front-most surface.
    pub mask: crate::heatmap::Heatmap,
    /// Index into the camera rig.
    pub camera: usize,
    /// Projected task point (u, v) in pixels.
    pub pixel: (f64, f64),
    pub pose: Pose,
}

/// L conditioning views plus one validation view (last) of a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    pub views: Vec<View>,
    pub task: KeypointTask,
}

impl MetaBatch {
    /// Number of conditioning views (total views minus the validation view).
    pub fn l(&self) -> usize {
        self.views.len() - 1
    }

    pub fn conditioning(&self) -> &[View] {
        &self.views[..self.views.len() - 1]
    }

    pub fn validation(&self) -> &View {
        self.views.last().expect("meta-batch has views")
    }
}

/// Camera-rig layout: `cameras` evenly spaced on a ring, all aimed at the
/// origin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius: f64,
    pub z: f64,
    pub focal_px: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { cameras: 4, radius: 0.7, z: 0.4, focal_px: 60.0 }
    }
}

/// Full scene/task sampling configuration. Defaults are the desk-scale
/// preset: 64x48 renders sized so objects span roughly 20-60% of the image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Gaussian target std in pixels (scales with resolution).
    pub sigma: f64,
    pub rig: RigConfig,
    pub object: ObjectConfig,
    /// Size of the procedural object library.
    pub object_count: usize,
    pub distractors: usize,
    /// Conditioning views per batch (one extra validation view is added).
    pub l_views: usize,
    /// Quaternion perturbation std for correlated in-batch poses.
    pub pose_std: f64,
    /// In-plane rotation range (radians) around the world z axis.
    pub in_plane: (f64, f64),
    /// Translation box half-extents (x, y) and z range.
    pub translation_xy: f64,
    pub translation_z: (f64, f64),
    /// Keypoint must project at least this many pixels inside the image.
    pub fov_margin_px: f64,
    /// Pose resamples allowed per view before giving up.
    pub fov_budget: usize,
    /// Augmentation padding in pixels.
    pub pad: usize,
    /// Per-pixel Gaussian image noise std ([0,1] scale).
    pub noise: f64,
    /// Std (meters) of the off-surface task offset; 0 keeps tasks on-surface.
    pub offsurface_sigma: f64,
    pub background: [f32; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 48,
            sigma: 2.0,
            rig: RigConfig::default(),
            object: ObjectConfig::default(),
            object_count: 12,
            distractors: 2,
            l_views: 3,
            pose_std: 0.1,
            in_plane: (-std::f64::consts::PI, std::f64::consts::PI),
            translation_xy: 0.1,
            translation_z: (-0.05, 0.1),
            fov_margin_px: 2.0,
            fov_budget: 100,
            pad: 8,
            noise: 0.01,
            offsurface_sigma: 0.0,
            background: [0.05, 0.06, 0.08],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidConfig("zero image dimensions".into()));
        }
        if self.sigma <= 0.0 {
            return Err(SceneError::InvalidConfig("sigma must be positive".into()));
        }
        if self.rig.cameras == 0 {
            return Err(SceneError::InvalidConfig("rig needs at least one camera".into()));
        }
        if self.object_count == 0 {
            return Err(SceneError::InvalidConfig("empty object library".into()));
        }
        if self.l_views == 0 {
            return Err(SceneError::InvalidConfig("need at least one conditioning view".into()));
        }
        if self.offsurface_sigma < 0.0 || self.pose_std < 0.0 || self.noise < 0.0 {
            return Err(SceneError::InvalidConfig("negative std".into()));
        }
        if self.translation_z.0 > self.translation_z.1 || self.in_plane.0 > self.in_plane.1 {
            return Err(SceneError::InvalidConfig("inverted range".into()));
        }
        self.object.validate()
    }

    /// Cameras of the ring rig this config describes.
    pub fn rig_cameras(&self) -> Vec<crate::geometry::Camera> {
        crate::geometry::ring_rig(
            self.rig.cameras,
            self.rig.radius,
            self.rig.z,
            self.rig.focal_px,
            self.width,
            self.height,
        )
    }

    /// Pose-sampler parameters (rotation range + translation box).
    pub fn pose_params(&self) -> crate::geometry::TaskPoseParams {
        crate::geometry::TaskPoseParams {
            in_plane: self.in_plane,
            in_plane_axis: Vector3::z(),
            translation: crate::geometry::Aabb::new(
                Vector3::new(-self.translation_xy, -self.translation_xy, self.translation_z.0),
                Vector3::new(self.translation_xy, self.translation_xy, self.translation_z.1),
            ),
        }
    }
}
