//! Tiny z-buffered triangle rasteriser.
//!
//! Just enough renderer for synthetic training views: flat-shaded faces, a
//! fixed directional light, near-plane clipping, and a per-pixel depth test.
//! Everything is deterministic — same meshes, poses, and camera always give
//! byte-identical output.

use nalgebra::Vector3;

use crate::geometry::Camera;
use crate::heatmap::Heatmap;

use super::mesh::Mesh;
use super::{Image, Pose, SceneError};

/// Camera-space near plane; geometry closer than this is clipped away.
const NEAR: f64 = 0.01;
/// Ambient + diffuse shading floor: brightness ranges over [0.3, 1.0].
const AMBIENT: f64 = 0.3;

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, -0.3, 0.85).normalize()
}

/// Clip a camera-space polygon against `z >= NEAR` (Sutherland–Hodgman).
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.z >= NEAR;
        let b_in = b.z >= NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

struct Frame {
    width: usize,
    height: usize,
    color: Vec<[f32; 3]>,
    depth: Vec<f64>,
    target: Vec<bool>,
}

impl Frame {
    fn new(width: usize, height: usize) -> Frame {
        Frame {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            depth: vec![f64::INFINITY; width * height],
            target: vec![false; width * height],
        }
    }

    /// Rasterise one screen-space triangle with per-vertex camera depth.
    /// `1/z` interpolates linearly in screen space, so depth is
    /// perspective-correct.
    fn triangle(&mut self, pts: [(f64, f64); 3], zs: [f64; 3], color: [f32; 3], is_target: bool) {
        let (p0, mut p1, mut p2) = (pts[0], pts[1], pts[2]);
        let (z0, mut z1, mut z2) = (zs[0], zs[1], zs[2]);
        let mut area = edge(p0, p1, p2);
        if area == 0.0 {
            return;
        }
        if area < 0.0 {
            std::mem::swap(&mut p1, &mut p2);
            std::mem::swap(&mut z1, &mut z2);
            area = -area;
        }
        let lo_u = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as usize;
        let hi_u = (p0.0.max(p1.0).max(p2.0).ceil() as isize).min(self.width as isize - 1);
        let lo_v = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as usize;
        let hi_v = (p0.1.max(p1.1).max(p2.1).ceil() as isize).min(self.height as isize - 1);
        if hi_u < lo_u as isize || hi_v < lo_v as isize {
            return;
        }
        let inv = [1.0 / z0, 1.0 / z1, 1.0 / z2];
        for v in lo_v..=hi_v as usize {
            for u in lo_u..=hi_u as usize {
                let p = (u as f64, v as f64);
                let w0 = edge(p1, p2, p);
                let w1 = edge(p2, p0, p);
                let w2 = edge(p0, p1, p);
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = (w0 * inv[0] + w1 * inv[1] + w2 * inv[2]) / area;
                if inv_z <= 0.0 {
                    continue;
                }
                let z = 1.0 / inv_z;
                let idx = v * self.width + u;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.color[idx] = color;
                    self.target[idx] = is_target;
                }
            }
        }
    }

    fn draw(&mut self, mesh: &Mesh, pose: &Pose, cam: &Camera, is_target: bool) {
        let light = light_dir();
        let rot = cam.rotation().transpose();
        let center = cam.center();
        let k = &cam.intrinsics;
        for (f, tri) in mesh.triangles.iter().enumerate() {
            let world: Vec<Vector3<f64>> =
                tri.iter().map(|&i| pose.apply(&mesh.vertices[i])).collect();
            let n = (world[1] - world[0]).cross(&(world[2] - world[0]));
            let n_len = n.norm();
            if n_len < 1e-18 {
                continue;
            }
            let brightness = AMBIENT + (1.0 - AMBIENT) * (n.dot(&light) / n_len).abs();
            let base = mesh.face_colors[f];
            let color = [
                (base[0] as f64 * brightness).clamp(0.0, 1.0) as f32,
                (base[1] as f64 * brightness).clamp(0.0, 1.0) as f32,
                (base[2] as f64 * brightness).clamp(0.0, 1.0) as f32,
            ];
            let cam_space: Vec<Vector3<f64>> = world.iter().map(|w| rot * (w - center)).collect();
            let clipped = clip_near(&cam_space);
            if clipped.len() < 3 {
                continue;
            }
            let screen: Vec<((f64, f64), f64)> = clipped
                .iter()
                .map(|c| {
                    let u = k[(0, 0)] * c.x / c.z + k[(0, 2)];
                    let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
                    ((u, v), c.z)
                })
                .collect();
            for i in 1..screen.len() - 1 {
                self.triangle(
                    [screen[0].0, screen[i].0, screen[i + 1].0],
                    [screen[0].1, screen[i].1, screen[i + 1].1],
                    color,
                    is_target,
                );
            }
        }
    }
}

/// Render the target object plus distractors into one view.
///
/// Returns `(image, mask, depth)`:
/// * `image` — flat-shaded RGB in [0, 1], `background` where nothing drew;
/// * `mask`  — 1.0 on pixels where the *target* mesh is the visible surface;
/// * `depth` — camera-space z of the visible surface, 0.0 on empty pixels.
pub fn render(
    target: &Mesh,
    pose: &Pose,
    cam: &Camera,
    background: [f32; 3],
    distractors: &[(&Mesh, Pose)],
) -> Result<(Image, Heatmap, Heatmap), SceneError> {
    let (w, h) = (cam.width, cam.height);
    let mut frame = Frame::new(w, h);
    frame.draw(target, pose, cam, true);
    for (mesh, dpose) in distractors {
        frame.draw(mesh, dpose, cam, false);
    }

    let mut image = Image::filled(w, h, background);
    let mut mask = Heatmap::zeros(w, h);
    let mut depth = Heatmap::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            if frame.depth[idx].is_finite() {
                let c = frame.color[idx];
                image.set(0, u, v, c[0]);
                image.set(1, u, v, c[1]);
                image.set(2, u, v, c[2]);
                *depth.at_mut(u, v) = frame.depth[idx];
                if frame.target[idx] {
                    *mask.at_mut(u, v) = 1.0;
                }
            }
        }
    }
    Ok((image, mask, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use crate::rng::Rng;
    use crate::scene::mesh::{make_object, ObjectConfig};
    use nalgebra::{Matrix3, Matrix4};

    fn straight_camera(width: usize, height: usize, focal: f64) -> Camera {
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(k, Matrix4::identity(), width, height).unwrap()
    }

    /// Axis-aligned square of side `s` in the local xy plane, fanned into 4
    /// triangles around its centre (Mesh::new requires at least 4).
    fn square(s: f64) -> Mesh {
        let h = s / 2.0;
        let vertices = vec![
            Vector3::new(-h, -h, 0.0),
            Vector3::new(h, -h, 0.0),
            Vector3::new(h, h, 0.0),
            Vector3::new(-h, h, 0.0),
            Vector3::new(0.0, 0.0, 0.0),
        ];
        let triangles = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
        let colors = vec![[0.5, 0.6, 0.7]; 4];
        Mesh::new(vertices, triangles, colors, 0).unwrap()
    }

    #[test]
    fn behind_camera_renders_empty() {
        let cam = straight_camera(64, 48, 60.0);
        let mesh = square(0.5);
        let pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, -2.0));
        let bg = [0.1, 0.2, 0.3];
        let (img, mask, depth) = render(&mesh, &pose, &cam, bg, &[]).unwrap();
        assert_eq!(mask.data.iter().sum::<f64>(), 0.0);
        assert_eq!(depth.data.iter().sum::<f64>(), 0.0);
        for v in 0..48 {
            for u in 0..64 {
                assert_eq!(img.at(0, u, v), 0.1);
                assert_eq!(img.at(2, u, v), 0.3);
            }
        }
    }

    #[test]
    fn square_covers_principal_point() {
        let cam = straight_camera(64, 48, 60.0);
        let mesh = square(0.5);
        let pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, 1.0));
        let bg = [0.0, 0.0, 0.0];
        let (img, mask, depth) = render(&mesh, &pose, &cam, bg, &[]).unwrap();
        let (cu, cv) = (31, 23); // nearest pixel to the principal point
        assert_eq!(mask.at(cu, cv), 1.0);
        assert!((depth.at(cu, cv) - 1.0).abs() < 1e-9);
        assert!(img.at(0, cu, cv) > 0.0);
    }

    /// A fronto-parallel square of side 0.5 m at depth 1 m under focal 200 px
    /// projects to a 100x100 px square: the mask area has a closed form.
    #[test]
    fn mask_area_matches_projected_area() {
        let cam = straight_camera(256, 256, 200.0);
        let mesh = square(0.5);
        let pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, 1.0));
        let (_, mask, _) = render(&mesh, &pose, &cam, [0.0; 3], &[]).unwrap();
        let area: f64 = mask.data.iter().sum();
        let expected = 10_000.0;
        assert!(
            (area - expected).abs() / expected < 0.02,
            "area {area} vs {expected}"
        );
    }

    #[test]
    fn nearer_distractor_occludes_target() {
        let cam = straight_camera(64, 48, 60.0);
        let target = square(1.0);
        let target_pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, 2.0));
        let blocker = square(0.25);
        let blocker_pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, 1.0));

        let (_, free_mask, _) = render(&target, &target_pose, &cam, [0.0; 3], &[]).unwrap();
        let (_, mask, depth) =
            render(&target, &target_pose, &cam, [0.0; 3], &[(&blocker, blocker_pose)]).unwrap();

        // The blocker is dead centre and strictly nearer: the centre pixel
        // flips to the distractor, and the masked area shrinks.
        assert_eq!(free_mask.at(31, 23), 1.0);
        assert_eq!(mask.at(31, 23), 0.0);
        assert!((depth.at(31, 23) - 1.0).abs() < 1e-9);
        let free_area: f64 = free_mask.data.iter().sum();
        let occluded_area: f64 = mask.data.iter().sum();
        assert!(occluded_area < free_area);
        // Depth at every drawn pixel is the minimum over both surfaces.
        for v in 0..48 {
            for u in 0..64 {
                if depth.at(u, v) > 0.0 && free_mask.at(u, v) > 0.0 {
                    assert!(depth.at(u, v) <= 2.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn flat_shading_gives_one_color_per_face() {
        let cam = straight_camera(64, 48, 60.0);
        // A single fronto-parallel square: every triangle has the same normal
        // and base color, so the whole silhouette is one flat color.
        let mesh = square(0.5);
        let pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, 1.0));
        let (img, mask, _) = render(&mesh, &pose, &cam, [0.0; 3], &[]).unwrap();
        let mut seen = None;
        for v in 0..48 {
            for u in 0..64 {
                if mask.at(u, v) == 1.0 {
                    let c = [img.at(0, u, v), img.at(1, u, v), img.at(2, u, v)];
                    match seen {
                        None => seen = Some(c),
                        Some(s) => assert_eq!(s, c),
                    }
                }
            }
        }
        let c = seen.expect("square must be visible");
        // Brightness is bounded by [ambient, 1] times the base color.
        assert!(c[0] >= (0.5 * 0.3 - 1e-6) as f32 && c[0] <= 0.5);
        assert!(c[1] >= (0.6 * 0.3 - 1e-6) as f32 && c[1] <= 0.6);
    }

    #[test]
    fn render_is_deterministic_for_procedural_objects() {
        let cam = straight_camera(64, 48, 60.0);
        let cfg = ObjectConfig::default();
        let mesh = make_object(&mut Rng::new(5), &cfg, 0).unwrap();
        let other = make_object(&mut Rng::new(6), &cfg, 1).unwrap();
        let pose = Pose::new(
            Quat::from_axis_angle(&Vector3::new(0.3, 1.0, -0.2), 0.8),
            Vector3::new(0.02, -0.01, 0.5),
        );
        let dpose = Pose::new(Quat::identity(), Vector3::new(0.1, 0.05, 0.8));
        let a = render(&mesh, &pose, &cam, [0.05, 0.06, 0.08], &[(&other, dpose)]).unwrap();
        let b = render(&mesh, &pose, &cam, [0.05, 0.06, 0.08], &[(&other, dpose)]).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data, b.1.data);
        assert_eq!(a.2.data, b.2.data);
        // And the object is actually in frame at this pose.
        assert!(a.1.data.iter().sum::<f64>() > 10.0);
    }

    #[test]
    fn partially_behind_mesh_is_near_clipped_not_garbage() {
        let cam = straight_camera(64, 48, 60.0);
        // A long square spanning from in front of the camera to behind it.
        let mesh = square(4.0);
        // Rotate the square into the xz plane so it crosses z = 0.
        let pose = Pose::new(
            Quat::from_axis_angle(&Vector3::new(1.0, 0.0, 0.0), std::f64::consts::FRAC_PI_2),
            Vector3::new(0.0, 0.3, 1.0),
        );
        let (_, mask, depth) = render(&mesh, &pose, &cam, [0.0; 3], &[]).unwrap();
        // Some of it is visible, and every drawn depth respects the near plane.
        assert!(mask.data.iter().sum::<f64>() > 0.0);
        for (&m, &d) in mask.data.iter().zip(&depth.data) {
            if m > 0.0 {
                assert!(d >= NEAR - 1e-12);
            }
        }
    }
}
