//! Pinhole camera math, pose sampling, ray lifting, least-squares
//! triangulation, and subset-scored robust 3D point selection.
//!
//! Pixel convention: `(u, v)` = (column, row), so `u` runs over `width`.
//! A camera's frame is x-right, y-down, z-forward; `world_from_cam` maps
//! camera coordinates into the world.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::Heatmap;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth in camera frame")]
    NonPositiveDepth,
    #[error("intrinsics matrix is singular")]
    SingularIntrinsics,
    #[error("degenerate ray geometry (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("no camera subset produced a valid triangulation")]
    NoValidSubset,
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt rig file: {0}")]
    CorruptRig(String),
}

/// Depth below this counts as "behind the camera".
const DEPTH_EPS: f64 = 1e-9;
/// Normal-equation condition number above which triangulation is rejected.
const DEGENERACY_CONDITION: f64 = 1e12;
/// Detection scores within this of each other count as tied, so the
/// larger-subset preference can actually fire on consistently-constructed
/// inputs (bitwise float ties essentially never happen).
const SCORE_TIE_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Quaternions
// ---------------------------------------------------------------------------

/// Unit quaternion (scalar-first). All constructors and sampling ops
/// normalise, keeping `|q| = 1` within 1e-12.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub fn identity() -> Self {
        Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn new_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 1e-12, "cannot normalise a null quaternion");
        Quat { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat { w: c, x: s * a.x, y: s * a.y, z: s * a.z }
    }

    /// Uniform over rotations (normalised 4D Gaussian).
    pub fn random_uniform(rng: &mut Rng) -> Self {
        loop {
            let (w, x, y, z) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
            if (w * w + x * x + y * y + z * z).sqrt() > 1e-6 {
                return Quat::new_normalized(w, x, y, z);
            }
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotation angle between the two orientations, in [0, pi].
    pub fn geodesic_angle(&self, o: &Quat) -> f64 {
        2.0 * self.dot(o).abs().clamp(0.0, 1.0).acos()
    }

    /// Hamilton product; `self * o` applies `o` first, then `self`.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Inverse rotation (the quaternion is kept unit-norm, so conjugation is
    /// inversion).
    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * v
    }
}

// ---------------------------------------------------------------------------
// Cameras and rays
// ---------------------------------------------------------------------------

/// Calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// 3x3 intrinsics (pixels): positive focal entries, zero skew,
    /// bottom row [0, 0, 1].
    pub intrinsics: Matrix3<f64>,
    /// Rigid 4x4 transform taking camera-frame points to world.
    pub world_from_cam: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_from_cam: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("zero image size".into()));
        }
        if !(intrinsics[(0, 0)] > 0.0) || !(intrinsics[(1, 1)] > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                intrinsics[(0, 0)],
                intrinsics[(1, 1)]
            )));
        }
        if intrinsics[(0, 1)].abs() > 1e-12 {
            return Err(GeometryError::InvalidCamera("nonzero skew".into()));
        }
        let bottom = [intrinsics[(2, 0)], intrinsics[(2, 1)], intrinsics[(2, 2)]];
        if bottom[0] != 0.0 || bottom[1] != 0.0 || (bottom[2] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidCamera(
                "intrinsics bottom row must be [0, 0, 1]".into(),
            ));
        }
        if intrinsics[(1, 0)] != 0.0 {
            return Err(GeometryError::InvalidCamera("K[1][0] must be zero".into()));
        }
        let r = world_from_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = r.transpose() * r - Matrix3::identity();
        if ortho.amax() > 1e-9 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation block not orthonormal (|R^T R - I| = {:.3e})",
                ortho.amax()
            )));
        }
        for c in 0..3 {
            if world_from_cam[(3, c)] != 0.0 {
                return Err(GeometryError::InvalidCamera("bottom row must be [0,0,0,1]".into()));
            }
        }
        if (world_from_cam[(3, 3)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidCamera("bottom row must be [0,0,0,1]".into()));
        }
        Ok(Camera { intrinsics, world_from_cam, width, height })
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    /// Image v grows opposite to `up` (y-down camera frame).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("eye equals target".into()))?;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Looking straight along `up`; any horizontal right will do.
            right = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
            if right.norm() < 1e-9 {
                right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let mut m = Matrix4::identity();
        for i in 0..3 {
            m[(i, 0)] = right[i];
            m[(i, 1)] = down[i];
            m[(i, 2)] = forward[i];
            m[(i, 3)] = eye[i];
        }
        Camera::new(intrinsics, m, width, height)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_from_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.world_from_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }

    /// World point expressed in the camera frame (rigid inverse).
    pub fn cam_from_world_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.center())
    }
}

/// Ray in world coordinates with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Result<Self, GeometryError> {
        let d = dir
            .try_normalize(1e-12)
            .ok_or(GeometryError::DegenerateGeometry { condition: f64::INFINITY })?;
        Ok(Ray { origin, dir: d })
    }

    /// Distance from `p` to the (infinite) line through this ray.
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.origin;
        (d - self.dir * d.dot(&self.dir)).norm()
    }
}

/// Perspective projection of world point `x`, in pixels. Errors when the
/// camera-frame depth is below 1e-9 m; the result may lie outside the image
/// bounds (callers filter FOV themselves).
pub fn project(cam: &Camera, x: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    let pc = cam.cam_from_world_point(x);
    if pc.z <= DEPTH_EPS {
        return Err(GeometryError::NonPositiveDepth);
    }
    let k = &cam.intrinsics;
    let u = k[(0, 0)] * pc.x / pc.z + k[(0, 2)];
    let v = k[(1, 1)] * pc.y / pc.z + k[(1, 2)];
    Ok((u, v))
}

/// Is a projected pixel within the image, shrunk by `margin` pixels per side?
pub fn in_fov(cam: &Camera, uv: (f64, f64), margin: f64) -> bool {
    uv.0 >= margin
        && uv.0 <= cam.width as f64 - 1.0 - margin
        && uv.1 >= margin
        && uv.1 <= cam.height as f64 - 1.0 - margin
}

/// Lift a pixel to its world-frame viewing ray. Pixels outside the image are
/// allowed; the origin is the camera centre.
pub fn pixel_ray(cam: &Camera, pixel: (f64, f64)) -> Result<Ray, GeometryError> {
    let kinv = cam
        .intrinsics
        .try_inverse()
        .ok_or(GeometryError::SingularIntrinsics)?;
    let dir_cam = kinv * Vector3::new(pixel.0, pixel.1, 1.0);
    let dir_world = cam.rotation() * dir_cam;
    Ray::new(cam.center(), dir_world)
}

/// Least-squares intersection of a bundle of rays: the point minimising the
/// summed squared distances to every ray, via the normal equations
/// `x = (sum_i (I - d_i d_i^T))^-1  sum_i (I - d_i d_i^T) a_i`.
///
/// Needs at least two rays, not all parallel; degeneracy is declared when the
/// normal matrix condition number exceeds 1e12.
pub fn triangulate(rays: &[Ray]) -> Result<Vector3<f64>, GeometryError> {
    triangulate_weighted(rays, &vec![1.0; rays.len()])
}

/// [`triangulate`] with per-ray weights: minimises the *weighted* sum of
/// squared ray distances. Weights must be non-negative and finite; a
/// zero-weighted ray drops out entirely, and if fewer than two rays carry
/// weight the normal matrix goes degenerate like any other rank-deficient
/// bundle.
pub fn triangulate_weighted(rays: &[Ray], weights: &[f64]) -> Result<Vector3<f64>, GeometryError> {
    if rays.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    if weights.len() != rays.len() {
        return Err(GeometryError::ShapeMismatch(format!(
            "{} rays vs {} weights",
            rays.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeometryError::InvalidWeights("weights must be finite and >= 0".into()));
    }
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    for (ray, &w) in rays.iter().zip(weights) {
        let proj = (Matrix3::identity() - ray.dir * ray.dir.transpose()) * w;
        a += proj;
        b += proj * ray.origin;
    }
    let eig = nalgebra::SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.amax();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= DEGENERACY_CONDITION) {
        return Err(GeometryError::DegenerateGeometry { condition });
    }
    // Solve with the eigendecomposition we already paid for.
    let vt_b = eig.eigenvectors.transpose() * b;
    let scaled = Vector3::new(
        vt_b[0] / eig.eigenvalues[0],
        vt_b[1] / eig.eigenvalues[1],
        vt_b[2] / eig.eigenvalues[2],
    );
    Ok(eig.eigenvectors * scaled)
}

/// Bilinear sample of a row-major map at `(u, v)`; caller guarantees
/// `0 <= u <= w-1`, `0 <= v <= h-1`.
fn bilinear(data: &[f64], w: usize, h: usize, u: f64, v: f64) -> f64 {
    let u0 = (u.floor() as usize).min(w.saturating_sub(2));
    let v0 = (v.floor() as usize).min(h.saturating_sub(2));
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = (u - u0 as f64).clamp(0.0, 1.0);
    let fv = (v - v0 as f64).clamp(0.0, 1.0);
    let m = |vv: usize, uu: usize| data[vv * w + uu];
    (1.0 - fu) * (1.0 - fv) * m(v0, u0)
        + fu * (1.0 - fv) * m(v0, u1)
        + (1.0 - fu) * fv * m(v1, u0)
        + fu * fv * m(v1, u1)
}

/// Max-normalised activation map `exp(l - max(l))` of a logit heatmap.
fn normalized_activation(hm: &Heatmap) -> Vec<f64> {
    let max = hm.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hm.data.iter().map(|&l| (l - max).exp()).collect()
}

fn score_against(
    x: &Vector3<f64>,
    cams: &[Camera],
    activations: &[Vec<f64>],
) -> f64 {
    let mut s = 0.0;
    for (cam, act) in cams.iter().zip(activations) {
        match project(cam, x) {
            Ok((u, v)) if in_fov(cam, (u, v), 0.0) => {
                s += bilinear(act, cam.width, cam.height, u, v);
            }
            _ => {} // behind the camera or out of bounds contributes 0
        }
    }
    s
}

/// Agreement score of a 3D point against per-camera logit heatmaps:
/// `S = sum_i exp(p_i - max(p_i))` bilinearly sampled at the reprojection of
/// `x` in camera i, with 0 for cameras where `x` is out of view or behind.
/// Lies in `[0, L]`.
pub fn detection_score(
    x: &Vector3<f64>,
    cams: &[Camera],
    heatmaps: &[Heatmap],
) -> Result<f64, GeometryError> {
    validate_cam_heatmaps(cams, heatmaps)?;
    let activations: Vec<Vec<f64>> = heatmaps.iter().map(normalized_activation).collect();
    Ok(score_against(x, cams, &activations))
}

fn validate_cam_heatmaps(cams: &[Camera], heatmaps: &[Heatmap]) -> Result<(), GeometryError> {
    if cams.len() != heatmaps.len() {
        return Err(GeometryError::ShapeMismatch(format!(
            "{} cameras vs {} heatmaps",
            cams.len(),
            heatmaps.len()
        )));
    }
    for (i, (c, h)) in cams.iter().zip(heatmaps).enumerate() {
        if c.width != h.width || c.height != h.height {
            return Err(GeometryError::ShapeMismatch(format!(
                "camera {i} is {}x{} but heatmap is {}x{}",
                c.width, c.height, h.width, h.height
            )));
        }
    }
    Ok(())
}

/// All index subsets of `0..n` with at least two elements, in ascending mask
/// order (so `2^n - n - 1` of them), each sorted ascending.
pub(crate) fn subsets_min2(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() >= 2 {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

/// Result of robust subset triangulation.
#[derive(Debug, Clone)]
pub struct SubsetTriangulation {
    pub point: Vector3<f64>,
    /// Ascending camera indices whose rays produced `point`.
    pub subset: Vec<usize>,
    /// Detection score of `point` over *all* cameras.
    pub score: f64,
}

/// Robust 3D point from per-camera keypoint logits: soft-argmax each heatmap,
/// lift rays, triangulate every camera subset of size >= 2, score each
/// candidate against all cameras with [`detection_score`], and keep the best.
/// Degenerate subsets are skipped. Near-equal scores (within 1e-9) break
/// toward the larger subset, then the lexicographically smallest index set.
pub fn best_subset_triangulate(
    cams: &[Camera],
    heatmaps: &[Heatmap],
) -> Result<SubsetTriangulation, GeometryError> {
    validate_cam_heatmaps(cams, heatmaps)?;
    if cams.len() < 2 {
        return Err(GeometryError::EmptyInput);
    }
    let peaks: Vec<(f64, f64)> = heatmaps.iter().map(crate::heatmap::soft_argmax).collect();
    let rays: Vec<Ray> = cams
        .iter()
        .zip(&peaks)
        .map(|(c, &p)| pixel_ray(c, p))
        .collect::<Result<_, _>>()?;
    let activations: Vec<Vec<f64>> = heatmaps.iter().map(normalized_activation).collect();

    let mut best: Option<SubsetTriangulation> = None;
    for subset in subsets_min2(cams.len()) {
        let subset_rays: Vec<Ray> = subset.iter().map(|&i| rays[i]).collect();
        let point = match triangulate(&subset_rays) {
            Ok(p) => p,
            Err(GeometryError::DegenerateGeometry { .. }) => continue,
            Err(e) => return Err(e),
        };
        let score = score_against(&point, cams, &activations);
        let candidate = SubsetTriangulation { point, subset, score };
        best = Some(match best.take() {
            None => candidate,
            Some(b) => {
                if candidate.score > b.score + SCORE_TIE_EPS {
                    candidate
                } else if (candidate.score - b.score).abs() <= SCORE_TIE_EPS {
                    // Tie: prefer more cameras, then the lexicographically
                    // smaller index set. Enumeration order already visits
                    // lex-smaller sets first among equal sizes, but compare
                    // explicitly to keep the rule local and obvious.
                    let longer = candidate.subset.len() > b.subset.len();
                    let same_len_lex_smaller = candidate.subset.len() == b.subset.len()
                        && candidate.subset < b.subset;
                    if longer || same_len_lex_smaller {
                        candidate
                    } else {
                        b
                    }
                } else {
                    b
                }
            }
        });
    }
    best.ok_or(GeometryError::NoValidSubset)
}

/// Confidence-weighted least-squares baseline: every camera's soft-argmax
/// ray goes into one weighted triangulation, weighted by the inverse spatial
/// spread of its heatmap (`1 / trace(cov)` of the softmax distribution, see
/// [`crate::heatmap::softmax_covariance_trace`]). Peaky, confident views
/// count more, but nothing is ever excluded — a confidently *wrong* view
/// still drags the answer, which is exactly the failure mode
/// [`best_subset_triangulate`] exists to fix.
pub fn weighted_ls_triangulate(
    cams: &[Camera],
    heatmaps: &[Heatmap],
) -> Result<Vector3<f64>, GeometryError> {
    validate_cam_heatmaps(cams, heatmaps)?;
    if cams.len() < 2 {
        return Err(GeometryError::EmptyInput);
    }
    let rays: Vec<Ray> = cams
        .iter()
        .zip(heatmaps)
        .map(|(c, h)| pixel_ray(c, crate::heatmap::soft_argmax(h)))
        .collect::<Result<_, _>>()?;
    let weights: Vec<f64> = heatmaps
        .iter()
        .map(|h| {
            let tr = crate::heatmap::softmax_covariance_trace(h);
            // A delta-peaked map has zero spread; cap its weight instead of
            // dividing by zero.
            1.0 / tr.max(1e-12)
        })
        .collect();
    triangulate_weighted(&rays, &weights)
}

// ---------------------------------------------------------------------------
// Task pose sampling
// ---------------------------------------------------------------------------

/// Axis-aligned box, used for uniform translation sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Aabb {
    pub fn new(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        assert!(lo.x <= hi.x && lo.y <= hi.y && lo.z <= hi.z, "inverted box");
        Aabb { lo, hi }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector3<f64> {
        Vector3::new(
            rng.uniform_in(self.lo.x, self.hi.x),
            rng.uniform_in(self.lo.y, self.hi.y),
            rng.uniform_in(self.lo.z, self.hi.z),
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.lo.x
            && p.x <= self.hi.x
            && p.y >= self.lo.y
            && p.y <= self.hi.y
            && p.z >= self.lo.z
            && p.z <= self.hi.z
    }
}

/// Everything about pose sampling that isn't the per-call noise scale: the
/// in-plane rotation range (radians; the paper leaves it unstated, default
/// full circle), the axis that rotation spins about (a camera's optical axis
/// so the silhouette is preserved), and the translation box (sized so objects
/// span roughly 20-60% of image width under the rig's default preset).
#[derive(Debug, Clone)]
pub struct TaskPoseParams {
    pub in_plane: (f64, f64),
    pub in_plane_axis: Vector3<f64>,
    pub translation: Aabb,
}

impl Default for TaskPoseParams {
    fn default() -> Self {
        TaskPoseParams {
            in_plane: (-std::f64::consts::PI, std::f64::consts::PI),
            in_plane_axis: Vector3::new(0.0, 0.0, 1.0),
            translation: Aabb::new(
                Vector3::new(-0.1, -0.1, -0.05),
                Vector3::new(0.1, 0.1, 0.1),
            ),
        }
    }
}

/// Sample a correlated object pose: perturb each component of `q_base` with
/// Gaussian noise of the given std, renormalise, compose a uniform in-plane
/// rotation about `params.in_plane_axis`, and draw a translation uniformly
/// from the box. Draw order is fixed (4 normals, 1 uniform, 3 uniforms) so
/// streams are reproducible.
pub fn sample_task_pose(
    rng: &mut Rng,
    q_base: &Quat,
    std: f64,
    params: &TaskPoseParams,
) -> (Quat, Vector3<f64>) {
    let (w, x, y, z) = (
        q_base.w + std * rng.normal(),
        q_base.x + std * rng.normal(),
        q_base.y + std * rng.normal(),
        q_base.z + std * rng.normal(),
    );
    let q = if (w * w + x * x + y * y + z * z).sqrt() > 1e-9 {
        Quat::new_normalized(w, x, y, z)
    } else {
        *q_base // vanishing perturbed norm: measure-zero fallback
    };
    let theta = rng.uniform_in(params.in_plane.0, params.in_plane.1);
    let q = if theta != 0.0 {
        Quat::from_axis_angle(&params.in_plane_axis, theta).mul(&q)
    } else {
        q
    };
    let t = params.translation.sample(rng);
    (q, t)
}

// ---------------------------------------------------------------------------
// Farthest point sampling
// ---------------------------------------------------------------------------

/// Greedy farthest-point sampling: start at the point nearest the centroid,
/// then repeatedly add the point maximising the distance to the selected set.
/// Ties break toward the lowest index, making the result deterministic.
/// Returns indices into `points`.
///
/// Note the greedy rule maximises the min-distance *per step*; it is a
/// 2-approximation of (and in general different from) the best subset an
/// exhaustive search would find.
pub fn farthest_point_sample_indices(
    points: &[Vector3<f64>],
    n: usize,
) -> Result<Vec<usize>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    if n > points.len() {
        return Err(GeometryError::ShapeMismatch(format!(
            "requested {n} samples from {} points",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut start = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - centroid).norm_squared();
        if d < best_d {
            best_d = d;
            start = i;
        }
    }
    let mut selected = Vec::with_capacity(n);
    if n == 0 {
        return Ok(selected);
    }
    selected.push(start);
    let mut min_dist: Vec<f64> = points
        .iter()
        .map(|p| (p - points[start]).norm_squared())
        .collect();
    while selected.len() < n {
        let mut pick = usize::MAX;
        let mut pick_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if !selected.contains(&i) && d > pick_d {
                pick_d = d;
                pick = i;
            }
        }
        selected.push(pick);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (points[i] - points[pick]).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// [`farthest_point_sample_indices`], returning the sampled points themselves.
pub fn farthest_point_sample(
    points: &[Vector3<f64>],
    n: usize,
) -> Result<Vec<Vector3<f64>>, GeometryError> {
    Ok(farthest_point_sample_indices(points, n)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

// ---------------------------------------------------------------------------
// Rig IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    intrinsics: [f64; 9],
    world_from_cam: [f64; 16],
    width: usize,
    height: usize,
}

/// Load a camera rig: a JSON array of
/// `{intrinsics: [9 row-major], world_from_cam: [16 row-major], width, height}`.
pub fn load_rig(path: &Path) -> Result<Vec<Camera>, GeometryError> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> =
        serde_json::from_str(&text).map_err(|e| GeometryError::CorruptRig(e.to_string()))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Camera::new(
                Matrix3::from_row_slice(&r.intrinsics),
                Matrix4::from_row_slice(&r.world_from_cam),
                r.width,
                r.height,
            )
            .map_err(|e| GeometryError::CorruptRig(format!("camera {i}: {e}")))
        })
        .collect()
}

pub fn save_rig(path: &Path, cams: &[Camera]) -> Result<(), GeometryError> {
    let records: Vec<CameraRecord> = cams
        .iter()
        .map(|c| {
            let mut k = [0.0; 9];
            let mut m = [0.0; 16];
            for r in 0..3 {
                for cc in 0..3 {
                    k[r * 3 + cc] = c.intrinsics[(r, cc)];
                }
            }
            for r in 0..4 {
                for cc in 0..4 {
                    m[r * 4 + cc] = c.world_from_cam[(r, cc)];
                }
            }
            CameraRecord { intrinsics: k, world_from_cam: m, width: c.width, height: c.height }
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)
        .map_err(|e| GeometryError::CorruptRig(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Evenly spaced ring of `n` inward-looking cameras at the given radius and
/// height, sharing one intrinsics block with the principal point at the pixel
/// grid centre.
pub fn ring_rig(
    n: usize,
    radius: f64,
    z: f64,
    focal_px: f64,
    width: usize,
    height: usize,
) -> Vec<Camera> {
    let k = Matrix3::new(
        focal_px,
        0.0,
        (width as f64 - 1.0) / 2.0,
        0.0,
        focal_px,
        (height as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    (0..n)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), z);
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 0.0, 1.0),
                k,
                width,
                height,
            )
            .expect("ring camera construction cannot fail")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{make_target, soft_argmax};
    use crate::rng::Rng;
    use nalgebra::Vector4;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn simple_k(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    fn random_camera(rng: &mut Rng) -> Camera {
        let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
        let radius = rng.uniform_in(0.6, 1.2);
        let z = rng.uniform_in(0.1, 0.8);
        let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), z);
        let target = Vector3::new(
            rng.uniform_in(-0.05, 0.05),
            rng.uniform_in(-0.05, 0.05),
            rng.uniform_in(-0.05, 0.05),
        );
        Camera::look_at(
            eye,
            target,
            Vector3::new(0.0, 0.0, 1.0),
            simple_k(rng.uniform_in(40.0, 90.0), 31.5, 23.5),
            64,
            48,
        )
        .unwrap()
    }

    #[test]
    fn identity_pose_projects_optical_axis_to_principal_point() {
        let cam = Camera::new(simple_k(50.0, 32.0, 24.0), Matrix4::identity(), 64, 48).unwrap();
        let (u, v) = project(&cam, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 24.0).abs() < 1e-12);
    }

    #[test]
    fn point_behind_camera_errors() {
        let cam = Camera::new(simple_k(50.0, 32.0, 24.0), Matrix4::identity(), 64, 48).unwrap();
        assert!(matches!(
            project(&cam, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth)
        ));
    }

    #[test]
    fn projection_matches_homogeneous_matrix_oracle() {
        // Independent oracle: build the 3x4 projection matrix K * [R^T | -R^T t]
        // and do one homogeneous multiply + divide.
        let mut rng = Rng::new(21);
        for _ in 0..300 {
            let cam = random_camera(&mut rng);
            let p = Vector3::new(
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
            );
            let rt = cam.rotation().transpose();
            let t = -rt * cam.center();
            let mut ext = nalgebra::Matrix3x4::<f64>::zeros();
            ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
            ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            let pm = cam.intrinsics * ext;
            let h = pm * Vector4::new(p.x, p.y, p.z, 1.0);
            if h.z <= 1e-9 {
                assert!(project(&cam, &p).is_err());
                continue;
            }
            let (u, v) = project(&cam, &p).unwrap();
            assert!((u - h.x / h.z).abs() < 1e-9, "{u} vs {}", h.x / h.z);
            assert!((v - h.y / h.z).abs() < 1e-9);
        }
    }

    #[test]
    fn image_axes_follow_camera_frame() {
        // Right of the camera -> larger u; below (-up) -> larger v.
        let cam = Camera::look_at(
            Vector3::new(1.0, 0.0, 0.3),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            simple_k(60.0, 31.5, 23.5),
            64,
            48,
        )
        .unwrap();
        let centre = Vector3::zeros();
        let (u0, v0) = project(&cam, &centre).unwrap();
        let right_world = cam.rotation().column(0).into_owned();
        let (u1, _) = project(&cam, &(centre + 0.05 * right_world)).unwrap();
        assert!(u1 > u0);
        // World +z is "up"; moving the point up must shrink v.
        let (_, v2) = project(&cam, &(centre + Vector3::new(0.0, 0.0, 0.05))).unwrap();
        assert!(v2 < v0);
    }

    #[test]
    fn pixel_ray_identity_principal_point() {
        let cam = Camera::new(simple_k(50.0, 32.0, 24.0), Matrix4::identity(), 64, 48).unwrap();
        let ray = pixel_ray(&cam, (32.0, 24.0)).unwrap();
        assert!((ray.dir - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(ray.origin.norm() < 1e-12);
    }

    #[test]
    fn pixel_ray_roundtrip_passes_through_point() {
        let mut rng = Rng::new(33);
        for _ in 0..300 {
            let cam = random_camera(&mut rng);
            let p = Vector3::new(
                rng.uniform_in(-0.15, 0.15),
                rng.uniform_in(-0.15, 0.15),
                rng.uniform_in(-0.1, 0.1),
            );
            let Ok(uv) = project(&cam, &p) else { continue };
            let ray = pixel_ray(&cam, uv).unwrap();
            assert!(ray.distance_to(&p) < 1e-9);
            assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_ray_matches_two_depth_unprojection_oracle() {
        // Oracle: unproject the pixel at depths 1 and 7 by explicit camera
        // algebra; the normalised chord must equal the ray direction.
        let mut rng = Rng::new(44);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let uv = (rng.uniform_in(-5.0, 68.0), rng.uniform_in(-5.0, 52.0));
            let kinv = cam.intrinsics.try_inverse().unwrap();
            let d = kinv * Vector3::new(uv.0, uv.1, 1.0);
            let p1 = cam.rotation() * (d * 1.0) + cam.center();
            let p7 = cam.rotation() * (d * 7.0) + cam.center();
            let chord = (p7 - p1).normalize();
            let ray = pixel_ray(&cam, uv).unwrap();
            assert!((ray.dir - chord).norm() < 1e-10);
            assert!(ray.distance_to(&p1) < 1e-9);
            assert!(ray.distance_to(&p7) < 1e-9);
        }
    }

    #[test]
    fn singular_intrinsics_detected() {
        let mut cam = Camera::new(simple_k(50.0, 32.0, 24.0), Matrix4::identity(), 64, 48).unwrap();
        cam.intrinsics[(0, 0)] = 0.0; // bypass constructor on purpose
        assert!(matches!(
            pixel_ray(&cam, (1.0, 1.0)),
            Err(GeometryError::SingularIntrinsics)
        ));
    }

    #[test]
    fn triangulate_two_intersecting_rays() {
        let p = Vector3::new(0.3, -0.2, 0.5);
        let r1 = Ray::new(Vector3::new(1.0, 0.0, 0.0), p - Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let r2 = Ray::new(Vector3::new(0.0, 1.0, 0.0), p - Vector3::new(0.0, 1.0, 0.0)).unwrap();
        let x = triangulate(&[r1, r2]).unwrap();
        assert!((x - p).norm() < 1e-9);
    }

    #[test]
    fn triangulate_parallel_rays_degenerate() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let r1 = Ray::new(Vector3::new(0.0, 0.0, 0.0), d).unwrap();
        let r2 = Ray::new(Vector3::new(1.0, 0.0, 0.0), d).unwrap();
        assert!(matches!(
            triangulate(&[r1, r2]),
            Err(GeometryError::DegenerateGeometry { .. })
        ));
        assert!(matches!(triangulate(&[]), Err(GeometryError::EmptyInput)));
        assert!(matches!(
            triangulate(&[r1]),
            Err(GeometryError::DegenerateGeometry { .. })
        ));
    }

    /// Summed squared point-to-ray distances, the objective triangulate
    /// claims to minimise.
    fn ray_sse(x: &Vector3<f64>, rays: &[Ray]) -> f64 {
        rays.iter().map(|r| r.distance_to(x).powi(2)).sum()
    }

    #[test]
    fn triangulate_matches_grid_refinement_oracle() {
        // Oracle: brute-force minimisation of the summed squared ray
        // distances on a shrinking 3D grid.
        let mut rng = Rng::new(55);
        for _ in 0..10 {
            let p = Vector3::new(
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
            );
            let rays: Vec<Ray> = (0..4)
                .map(|_| {
                    let origin = Vector3::new(
                        rng.uniform_in(-1.5, 1.5),
                        rng.uniform_in(-1.5, 1.5),
                        rng.uniform_in(-1.5, 1.5),
                    );
                    // Perturb the exact direction so rays don't intersect.
                    let dir = (p - origin)
                        + Vector3::new(
                            0.02 * rng.normal(),
                            0.02 * rng.normal(),
                            0.02 * rng.normal(),
                        );
                    Ray::new(origin, dir).unwrap()
                })
                .collect();
            let x = triangulate(&rays).unwrap();

            let mut centre = p;
            let mut half = 0.5;
            let mut best = (f64::INFINITY, centre);
            for _round in 0..6 {
                for i in 0..21 {
                    for j in 0..21 {
                        for k in 0..21 {
                            let cand = centre
                                + Vector3::new(
                                    half * (i as f64 / 10.0 - 1.0),
                                    half * (j as f64 / 10.0 - 1.0),
                                    half * (k as f64 / 10.0 - 1.0),
                                );
                            let sse = ray_sse(&cand, &rays);
                            if sse < best.0 {
                                best = (sse, cand);
                            }
                        }
                    }
                }
                centre = best.1;
                half *= 0.2;
            }
            assert!(
                (x - best.1).norm() < 1e-4,
                "solver {x:?} vs grid oracle {:?}",
                best.1
            );
            assert!(ray_sse(&x, &rays) <= best.0 + 1e-12);
        }
    }

    #[test]
    fn triangulate_invariant_to_order_and_direction_sign() {
        let mut rng = Rng::new(66);
        let rays: Vec<Ray> = (0..4)
            .map(|_| {
                Ray::new(
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                )
                .unwrap()
            })
            .collect();
        let x = triangulate(&rays).unwrap();
        let mut reversed: Vec<Ray> = rays.iter().rev().cloned().collect();
        reversed[0] = Ray::new(reversed[0].origin, -reversed[0].dir).unwrap();
        let y = triangulate(&reversed).unwrap();
        assert!((x - y).norm() < 1e-9);
    }

    #[test]
    fn detection_score_peaked_heatmaps_give_camera_count() {
        let cams = ring_rig(4, 0.8, 0.5, 60.0, 64, 48);
        let p = Vector3::new(0.02, -0.03, 0.01);
        let heatmaps: Vec<Heatmap> = cams
            .iter()
            .map(|c| {
                // Max-logit plateau over the 2x2 bilinear support of the
                // reprojection, so the sampled normalised value is exactly 1.
                let (u, v) = project(c, &p).unwrap();
                let mut hm = Heatmap::zeros(64, 48);
                let (u0, v0) = (u.floor() as usize, v.floor() as usize);
                for dv in 0..2 {
                    for du in 0..2 {
                        *hm.at_mut(u0 + du, v0 + dv) = 10.0;
                    }
                }
                hm
            })
            .collect();
        let s = detection_score(&p, &cams, &heatmaps).unwrap();
        assert!((s - 4.0).abs() < 1e-12, "score {s}");

        // A point far outside every view scores zero.
        let s0 = detection_score(&Vector3::new(50.0, 0.0, 0.0), &cams, &heatmaps).unwrap();
        assert_eq!(s0, 0.0);
    }

    #[test]
    fn detection_score_matches_direct_reevaluation_oracle() {
        let mut rng = Rng::new(77);
        let cams = ring_rig(3, 0.9, 0.4, 55.0, 64, 48);
        for _ in 0..50 {
            let heatmaps: Vec<Heatmap> = (0..3)
                .map(|_| {
                    Heatmap::new(64, 48, (0..64 * 48).map(|_| 2.0 * rng.normal()).collect())
                        .unwrap()
                })
                .collect();
            let x = Vector3::new(
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(-0.2, 0.2),
            );
            // Oracle: bilinear interpolation written out long-hand on the
            // explicitly normalised map.
            let mut expected = 0.0;
            for (cam, hm) in cams.iter().zip(&heatmaps) {
                let Ok((u, v)) = project(cam, &x) else { continue };
                if !(u >= 0.0 && u <= 63.0 && v >= 0.0 && v <= 47.0) {
                    continue;
                }
                let mx = hm.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let norm: Vec<f64> = hm.data.iter().map(|&l| (l - mx).exp()).collect();
                let (u0, v0) = (u.floor().min(62.0), v.floor().min(46.0));
                let (fu, fv) = (u - u0, v - v0);
                let at = |vv: f64, uu: f64| norm[vv as usize * 64 + uu as usize];
                expected += (1.0 - fu) * (1.0 - fv) * at(v0, u0)
                    + fu * (1.0 - fv) * at(v0, u0 + 1.0)
                    + (1.0 - fu) * fv * at(v0 + 1.0, u0)
                    + fu * fv * at(v0 + 1.0, u0 + 1.0);
            }
            let got = detection_score(&x, &cams, &heatmaps).unwrap();
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
            assert!((0.0..=3.0 + 1e-12).contains(&got));
        }
    }

    #[test]
    fn subset_enumeration_count() {
        for n in 2..=6 {
            let subsets = subsets_min2(n);
            assert_eq!(subsets.len(), (1usize << n) - n - 1);
            assert!(subsets.iter().all(|s| s.len() >= 2));
        }
    }

    #[test]
    fn best_subset_keeps_all_consistent_cameras() {
        let cams = ring_rig(4, 0.8, 0.5, 60.0, 64, 48);
        let p = Vector3::new(0.03, 0.01, -0.02);
        let heatmaps: Vec<Heatmap> = cams
            .iter()
            .map(|c| {
                let uv = project(c, &p).unwrap();
                make_target(64, 48, uv, 2.0).unwrap().ln()
            })
            .collect();
        let out = best_subset_triangulate(&cams, &heatmaps).unwrap();
        assert_eq!(out.subset, vec![0, 1, 2, 3]);
        assert!((out.point - p).norm() < 0.02, "err {}", (out.point - p).norm());
    }

    #[test]
    fn best_subset_excludes_corrupted_camera() {
        let cams = ring_rig(4, 0.8, 0.5, 60.0, 64, 48);
        let p = Vector3::new(-0.02, 0.04, 0.0);
        let heatmaps: Vec<Heatmap> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (u, v) = project(c, &p).unwrap();
                let shift = if i == 2 { 20.0 } else { 0.0 };
                make_target(64, 48, (u + shift, v), 2.0).unwrap().ln()
            })
            .collect();
        let out = best_subset_triangulate(&cams, &heatmaps).unwrap();
        assert!(!out.subset.contains(&2), "chose {:?}", out.subset);
        assert!((out.point - p).norm() < 0.02);

        // Exhaustive verification: no candidate subset scores higher.
        let peaks: Vec<(f64, f64)> = heatmaps.iter().map(soft_argmax).collect();
        for subset in subsets_min2(4) {
            let rays: Vec<Ray> = subset
                .iter()
                .map(|&i| pixel_ray(&cams[i], peaks[i]).unwrap())
                .collect();
            if let Ok(x) = triangulate(&rays) {
                let s = detection_score(&x, &cams, &heatmaps).unwrap();
                assert!(s <= out.score + 1e-9, "subset {subset:?} beats winner");
            }
        }
    }

    #[test]
    fn best_subset_two_cameras_single_candidate() {
        let cams = ring_rig(2, 0.8, 0.5, 60.0, 64, 48);
        let p = Vector3::new(0.0, 0.05, 0.02);
        let heatmaps: Vec<Heatmap> = cams
            .iter()
            .map(|c| make_target(64, 48, project(c, &p).unwrap(), 2.0).unwrap().ln())
            .collect();
        let out = best_subset_triangulate(&cams, &heatmaps).unwrap();
        assert_eq!(out.subset, vec![0, 1]);
        assert!(matches!(
            best_subset_triangulate(&cams[..1], &heatmaps[..1]),
            Err(GeometryError::EmptyInput)
        ));
    }

    #[test]
    fn unit_weights_reproduce_the_unweighted_triangulation_exactly() {
        let mut rng = Rng::new(91);
        for _ in 0..20 {
            let rays: Vec<Ray> = (0..4)
                .map(|_| {
                    Ray::new(
                        Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                        Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                    )
                    .unwrap()
                })
                .collect();
            let plain = triangulate(&rays);
            let weighted = triangulate_weighted(&rays, &[1.0; 4]);
            match (plain, weighted) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                (a, b) => panic!("disagree: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn zero_weight_drops_a_ray_from_the_solve() {
        let mut rng = Rng::new(92);
        let rays: Vec<Ray> = (0..3)
            .map(|_| {
                Ray::new(
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                )
                .unwrap()
            })
            .collect();
        let without = triangulate(&rays[..2]).unwrap();
        let zeroed = triangulate_weighted(&rays, &[1.0, 1.0, 0.0]).unwrap();
        assert!((without - zeroed).norm() < 1e-12);
    }

    #[test]
    fn upweighting_a_ray_pulls_the_solution_onto_it() {
        // Three skew rays; as the third ray's weight grows, the solution's
        // distance to that ray must shrink monotonically toward zero.
        let rays = [
            Ray::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)).unwrap(),
            Ray::new(Vector3::new(0.0, 1.0, 0.3), Vector3::new(0.0, 1.0, 0.0)).unwrap(),
            Ray::new(Vector3::new(0.5, -0.5, 1.0), Vector3::new(1.0, 1.0, 0.0)).unwrap(),
        ];
        let mut last = f64::INFINITY;
        for w in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            let x = triangulate_weighted(&rays, &[1.0, 1.0, w]).unwrap();
            let d = rays[2].distance_to(&x);
            assert!(d < last, "weight {w}: distance {d} did not shrink from {last}");
            last = d;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn weight_validation_rejects_bad_input() {
        let rays = [
            Ray::new(Vector3::zeros(), Vector3::x()).unwrap(),
            Ray::new(Vector3::new(0.0, 1.0, 0.0), Vector3::y()).unwrap(),
        ];
        assert!(matches!(
            triangulate_weighted(&rays, &[1.0]),
            Err(GeometryError::ShapeMismatch(_))
        ));
        assert!(matches!(
            triangulate_weighted(&rays, &[1.0, -0.5]),
            Err(GeometryError::InvalidWeights(_))
        ));
        assert!(matches!(
            triangulate_weighted(&rays, &[1.0, f64::NAN]),
            Err(GeometryError::InvalidWeights(_))
        ));
    }

    #[test]
    fn confidence_weighting_discounts_a_diffuse_wrong_view() {
        // Two sharp, correct views and one broad view peaked 12px off. The
        // diffuse view carries little weight, so the weighted solve lands
        // nearer the truth than an equal-weight solve from the same peaks.
        let cams = ring_rig(3, 0.8, 0.5, 60.0, 64, 48);
        let p = Vector3::new(0.02, -0.03, 0.01);
        let heatmaps: Vec<Heatmap> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (u, v) = project(c, &p).unwrap();
                let (shift, sigma) = if i == 1 { (12.0, 8.0) } else { (0.0, 1.5) };
                make_target(64, 48, (u + shift, v), sigma).unwrap().ln()
            })
            .collect();
        let weighted = weighted_ls_triangulate(&cams, &heatmaps).unwrap();
        let peaks: Vec<(f64, f64)> = heatmaps.iter().map(soft_argmax).collect();
        let rays: Vec<Ray> = cams
            .iter()
            .zip(&peaks)
            .map(|(c, &uv)| pixel_ray(c, uv).unwrap())
            .collect();
        let equal = triangulate(&rays).unwrap();
        assert!(
            (weighted - p).norm() < (equal - p).norm(),
            "weighted err {} vs equal-weight err {}",
            (weighted - p).norm(),
            (equal - p).norm()
        );
    }

    #[test]
    fn sample_task_pose_zero_std_returns_base() {
        let mut rng = Rng::new(1);
        let base = Quat::random_uniform(&mut rng);
        let params = TaskPoseParams {
            in_plane: (0.0, 0.0),
            ..TaskPoseParams::default()
        };
        let (q, t) = sample_task_pose(&mut rng, &base, 0.0, &params);
        assert_eq!(q, base);
        assert!(params.translation.contains(&t));
    }

    #[test]
    fn sample_task_pose_unit_norm_and_translation_in_box() {
        let mut rng = Rng::new(2);
        let base = Quat::random_uniform(&mut rng);
        let params = TaskPoseParams::default();
        for _ in 0..500 {
            let (q, t) = sample_task_pose(&mut rng, &base, 0.2, &params);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert!(params.translation.contains(&t));
        }
    }

    #[test]
    fn sample_task_pose_geodesic_angle_matches_monte_carlo_oracle() {
        // Oracle: same perturbation law implemented with the rand crate's
        // generator and distributions, i.e. an independent sampling path.
        let std = 0.2;
        let base = Quat::new_normalized(0.3, -0.5, 0.4, 0.2);
        let n = 10_000;

        let mut oracle_rng = StdRng::seed_from_u64(999);
        let normal = Normal::new(0.0, std).unwrap();
        let mut oracle_mean = 0.0;
        for _ in 0..n {
            let q = Quat::new_normalized(
                base.w + normal.sample(&mut oracle_rng),
                base.x + normal.sample(&mut oracle_rng),
                base.y + normal.sample(&mut oracle_rng),
                base.z + normal.sample(&mut oracle_rng),
            );
            oracle_mean += q.geodesic_angle(&base);
        }
        oracle_mean /= n as f64;

        let params = TaskPoseParams {
            in_plane: (0.0, 0.0), // isolate the quaternion perturbation
            ..TaskPoseParams::default()
        };
        let mut rng = Rng::new(3);
        let mut mean = 0.0;
        for _ in 0..n {
            let (q, _) = sample_task_pose(&mut rng, &base, std, &params);
            mean += q.geodesic_angle(&base);
        }
        mean /= n as f64;
        assert!(
            (mean - oracle_mean).abs() / oracle_mean < 0.05,
            "mean {mean} vs oracle {oracle_mean}"
        );
    }

    #[test]
    fn fps_trivial_cases() {
        let pts: Vec<Vector3<f64>> = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(0.0, 3.0, 0.0),
        ];
        // n = |points| returns a permutation of all indices.
        let mut all = farthest_point_sample_indices(&pts, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        // n = 1 returns the centroid-nearest point.
        let centroid = (pts[0] + pts[1] + pts[2]) / 3.0;
        let nearest = (0..3)
            .min_by(|&a, &b| {
                (pts[a] - centroid)
                    .norm()
                    .partial_cmp(&(pts[b] - centroid).norm())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(farthest_point_sample_indices(&pts, 1).unwrap(), vec![nearest]);
        assert!(matches!(
            farthest_point_sample_indices(&[], 1),
            Err(GeometryError::EmptyInput)
        ));
    }

    #[test]
    fn fps_cube_corners_greedy_optimal_per_step() {
        let corners: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                Vector3::new(
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                )
            })
            .collect();
        let picked = farthest_point_sample_indices(&corners, 4).unwrap();
        assert_eq!(picked.len(), 4);

        // Oracle 1: each greedy step maximises the min distance to the
        // already-selected prefix (checked exhaustively).
        for step in 1..4 {
            let prefix = &picked[..step];
            let min_d = |i: usize| {
                prefix
                    .iter()
                    .map(|&j| (corners[i] - corners[j]).norm())
                    .fold(f64::INFINITY, f64::min)
            };
            let chosen = min_d(picked[step]);
            for i in 0..8 {
                if !prefix.contains(&i) {
                    assert!(min_d(i) <= chosen + 1e-12, "step {step}: {i} beats {}", picked[step]);
                }
            }
        }

        // Oracle 2: exhaustive search over all C(8,4) subsets. Greedy cannot
        // reach the exhaustive optimum here (its second pick is always the
        // space diagonal), but it must satisfy the classic 2-approximation.
        let min_pairwise = |set: &[usize]| {
            let mut m = f64::INFINITY;
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    m = m.min((corners[set[i]] - corners[set[j]]).norm());
                }
            }
            m
        };
        let mut exhaustive_best = 0.0_f64;
        for a in 0..8 {
            for b in a + 1..8 {
                for c in b + 1..8 {
                    for d in c + 1..8 {
                        exhaustive_best = exhaustive_best.max(min_pairwise(&[a, b, c, d]));
                    }
                }
            }
        }
        assert!((exhaustive_best - 2.0_f64.sqrt()).abs() < 1e-12);
        assert!(min_pairwise(&picked) >= exhaustive_best / 2.0 - 1e-12);
    }

    #[test]
    fn rig_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.json");
        let rig = ring_rig(3, 0.8, 0.5, 60.0, 64, 48);
        save_rig(&path, &rig).unwrap();
        let loaded = load_rig(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in rig.iter().zip(&loaded) {
            assert!((a.intrinsics - b.intrinsics).amax() < 1e-12);
            assert!((a.world_from_cam - b.world_from_cam).amax() < 1e-12);
            assert_eq!((a.width, a.height), (b.width, b.height));
        }
        // Corrupt file surfaces as CorruptRig.
        std::fs::write(&path, "[{\"intrinsics\": [1,2,3]}]").unwrap();
        assert!(matches!(load_rig(&path), Err(GeometryError::CorruptRig(_))));
    }

    #[test]
    fn camera_validation_rejects_bad_inputs() {
        let k = simple_k(50.0, 32.0, 24.0);
        assert!(Camera::new(k, Matrix4::identity(), 0, 48).is_err());
        let mut bad_k = k;
        bad_k[(0, 0)] = -1.0;
        assert!(Camera::new(bad_k, Matrix4::identity(), 64, 48).is_err());
        let mut skewed = k;
        skewed[(0, 1)] = 0.5;
        assert!(Camera::new(skewed, Matrix4::identity(), 64, 48).is_err());
        let mut bad_rot = Matrix4::identity();
        bad_rot[(0, 0)] = 1.5;
        assert!(Camera::new(k, bad_rot, 64, 48).is_err());
    }

    #[test]
    fn quaternion_rotation_matches_nalgebra() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let q = Quat::random_uniform(&mut rng);
            let nq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q.w, q.x, q.y, q.z,
            ));
            let v = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            assert!((q.rotate(&v) - nq * v).norm() < 1e-12);
            // Composition agrees too.
            let q2 = Quat::random_uniform(&mut rng);
            let nq2 = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q2.w, q2.x, q2.y, q2.z,
            ));
            assert!((q.mul(&q2).rotate(&v) - (nq * nq2) * v).norm() < 1e-12);
        }
    }

    #[test]
    fn conjugate_inverts_a_rotation() {
        let mut rng = Rng::new(16);
        for _ in 0..50 {
            let q = Quat::random_uniform(&mut rng);
            let v = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            assert!((q.conjugate().rotate(&q.rotate(&v)) - v).norm() < 1e-12);
            // acos near 1 is ill-conditioned, so the angle bound is loose.
            assert!(q.mul(&q.conjugate()).geodesic_angle(&Quat::identity()) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn triangulate_output_minimises_sse(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let rays: Vec<Ray> = (0..3).map(|_| {
                Ray::new(
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                    Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                ).unwrap()
            }).collect();
            if let Ok(x) = triangulate(&rays) {
                let base = ray_sse(&x, &rays);
                for _ in 0..20 {
                    let delta = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.01;
                    prop_assert!(ray_sse(&(x + delta), &rays) + 1e-12 >= base);
                }
            }
        }

        #[test]
        fn detection_score_monotone_in_reprojected_pixel(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let cams = ring_rig(3, 0.85, 0.45, 58.0, 32, 24);
            let x = Vector3::new(
                rng.uniform_in(-0.08, 0.08),
                rng.uniform_in(-0.08, 0.08),
                rng.uniform_in(-0.05, 0.05),
            );
            let mut heatmaps: Vec<Heatmap> = (0..3).map(|_| {
                Heatmap::new(32, 24, (0..32*24).map(|_| rng.normal()).collect()).unwrap()
            }).collect();
            let before = detection_score(&x, &cams, &heatmaps).unwrap();
            // Raise the logit at the pixel nearest one reprojection, staying
            // strictly below that map's max so the normalisation is untouched
            // (raising the max itself can redistribute mass and is outside
            // the property's domain).
            if let Ok((u, v)) = project(&cams[0], &x) {
                if u >= 0.0 && u <= 31.0 && v >= 0.0 && v <= 23.0 {
                    let (ui, vi) = (u.round() as usize, v.round() as usize);
                    let max = heatmaps[0].data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let old = heatmaps[0].at(ui, vi);
                    if old < max - 0.2 {
                        *heatmaps[0].at_mut(ui, vi) = old + 0.1;
                        let after = detection_score(&x, &cams, &heatmaps).unwrap();
                        prop_assert!(after + 1e-12 >= before, "{after} < {before}");
                    }
                }
            }
        }
    }
}
