//! Procedural object meshes.
//!
//! Objects are superellipsoid bodies with a wedge "nose" fused on, which
//! breaks every rotational symmetry of the body — a keypoint fixed in the
//! object frame is then visually identifiable from any view. Face colors
//! carry orientation cues too: the nose, the body, and the body's upper
//! half get distinct shades plus per-face jitter.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::rng::Rng;

/// Triangle mesh in the object's local frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub face_colors: Vec<[f32; 3]>,
    pub object_id: usize,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        face_colors: Vec<[f32; 3]>,
        object_id: usize,
    ) -> Result<Self, SceneError> {
        if triangles.len() < 4 {
            return Err(SceneError::InvalidMesh(format!(
                "{} triangles (need at least 4)",
                triangles.len()
            )));
        }
        if face_colors.len() != triangles.len() {
            return Err(SceneError::InvalidMesh("one color per face required".into()));
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(SceneError::InvalidMesh("triangle index out of range".into()));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(SceneError::InvalidMesh("non-finite vertex".into()));
        }
        Ok(Mesh { vertices, triangles, face_colors, object_id })
    }

    pub fn triangle_vertices(&self, face: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounds (lo, hi) over all vertices.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Nearest point on the surface to `p`, with its distance.
    pub fn closest_surface_point(&self, p: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let mut best = (Vector3::zeros(), f64::INFINITY);
        for f in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_vertices(f);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (p - q).norm();
            if d < best.1 {
                best = (q, d);
            }
        }
        best
    }

    /// Whether `p` lies on some triangle within `tol` meters.
    pub fn contains_surface_point(&self, p: &Vector3<f64>, tol: f64) -> bool {
        self.closest_surface_point(p).1 <= tol
    }

    /// Append another mesh's geometry (keeps this mesh's object id).
    fn fuse(&mut self, other: &Mesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        self.face_colors.extend_from_slice(&other.face_colors);
    }
}

/// Closest point on triangle (a, b, c) to p — region-based projection
/// (vertex, edge, or face foot point, whichever is nearest).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return a + ab * t;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return a + ac * t;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * t;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Ranges for the procedural object family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectConfig {
    /// Body half-length along x (meters), sampled uniformly.
    pub half_extent: (f64, f64),
    /// Body y half-extent as a fraction of x.
    pub aspect_y: (f64, f64),
    /// Body z half-extent as a fraction of x.
    pub aspect_z: (f64, f64),
    /// Superellipsoid exponent range (1 = ellipsoid, <1 boxier, >1 pointier).
    pub exponent: (f64, f64),
    pub lat_segments: usize,
    pub lon_segments: usize,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        ObjectConfig {
            half_extent: (0.11, 0.19),
            aspect_y: (0.55, 0.8),
            aspect_z: (0.35, 0.6),
            exponent: (0.6, 1.3),
            lat_segments: 10,
            lon_segments: 14,
        }
    }
}

impl ObjectConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ranges = [self.half_extent, self.aspect_y, self.aspect_z, self.exponent];
        for (lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
                return Err(SceneError::InvalidConfig(format!("bad range ({lo}, {hi})")));
            }
        }
        if self.exponent.0 < 0.2 || self.exponent.1 > 1.8 {
            return Err(SceneError::InvalidConfig(
                "exponents outside [0.2, 1.8] mesh badly".into(),
            ));
        }
        if self.lat_segments < 4 || self.lon_segments < 6 {
            return Err(SceneError::InvalidConfig("mesh grid too coarse".into()));
        }
        Ok(())
    }

    /// Everything make_object produces fits inside this half-extent.
    pub fn max_extent(&self) -> f64 {
        // Body reaches half_extent.1; the nose protrudes at most 0.8 body
        // lengths beyond the 0.75 attachment point (see make_object).
        self.half_extent.1 * (0.75 + 0.8)
    }
}

fn powsign(t: f64, e: f64) -> f64 {
    t.signum() * t.abs().powf(e)
}

/// Superellipsoid surface mesh with poles collapsed to single vertices.
/// Exposed separately so its area can be checked against the parametric
/// surface integral.
pub fn superellipsoid_mesh(
    a: f64,
    b: f64,
    c: f64,
    e1: f64,
    e2: f64,
    lat: usize,
    lon: usize,
) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    assert!(lat >= 2 && lon >= 3);
    let mut vertices = Vec::with_capacity((lat - 1) * lon + 2);
    // Interior rings: eta in (-pi/2, pi/2) exclusive of the poles.
    for i in 1..lat {
        let eta = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / lat as f64;
        let (se, ce) = eta.sin_cos();
        for j in 0..lon {
            let omega = 2.0 * std::f64::consts::PI * j as f64 / lon as f64;
            let (so, co) = omega.sin_cos();
            vertices.push(Vector3::new(
                a * powsign(ce, e1) * powsign(co, e2),
                b * powsign(ce, e1) * powsign(so, e2),
                c * powsign(se, e1),
            ));
        }
    }
    let south = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, -c));
    let north = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, c));

    let ring = |i: usize, j: usize| (i - 1) * lon + (j % lon);
    let mut triangles = Vec::new();
    for j in 0..lon {
        triangles.push([south, ring(1, j + 1), ring(1, j)]);
        triangles.push([north, ring(lat - 1, j), ring(lat - 1, j + 1)]);
    }
    for i in 1..lat - 1 {
        for j in 0..lon {
            let (p00, p01) = (ring(i, j), ring(i, j + 1));
            let (p10, p11) = (ring(i + 1, j), ring(i + 1, j + 1));
            triangles.push([p00, p01, p11]);
            triangles.push([p00, p11, p10]);
        }
    }
    orient_outward(&vertices, &mut triangles);
    (vertices, triangles)
}

/// Triangular prism: right-triangle cross-section in the xz plane (legs
/// `length` along x and `height` along z), extruded `width` along y.
pub fn wedge_mesh(length: f64, width: f64, height: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let hw = width * 0.5;
    let section = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(length, 0.0, 0.0),
        Vector3::new(0.0, 0.0, height),
    ];
    let mut vertices = Vec::with_capacity(6);
    for y in [-hw, hw] {
        for s in &section {
            vertices.push(Vector3::new(s.x, y, s.z));
        }
    }
    let mut triangles = vec![
        [0, 1, 2], // -y cap
        [3, 5, 4], // +y cap
        [0, 3, 1],
        [1, 3, 4], // bottom
        [1, 4, 2],
        [2, 4, 5], // hypotenuse
        [0, 2, 3],
        [2, 5, 3], // back
    ];
    orient_outward(&vertices, &mut triangles);
    (vertices, triangles)
}

/// Flip faces whose normal points toward the centroid. Valid for shapes
/// star-shaped around their centroid, which both primitives are.
fn orient_outward(vertices: &[Vector3<f64>], triangles: &mut [[usize; 3]]) {
    let centroid = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
    for t in triangles.iter_mut() {
        let [a, b, c] = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
        let n = (b - a).cross(&(c - a));
        let outward = (a + b + c) / 3.0 - centroid;
        if n.dot(&outward) < 0.0 {
            t.swap(1, 2);
        }
    }
}

/// Sample one procedural instance. Identical (seed, config) pairs produce
/// identical meshes; the rng draw order is fixed (body dims, exponents, nose
/// dims, palette, then per-face jitter).
pub fn make_object(rng: &mut Rng, cfg: &ObjectConfig, object_id: usize) -> Result<Mesh, SceneError> {
    cfg.validate()?;
    let a = rng.uniform_in(cfg.half_extent.0, cfg.half_extent.1);
    let b = a * rng.uniform_in(cfg.aspect_y.0, cfg.aspect_y.1);
    let c = a * rng.uniform_in(cfg.aspect_z.0, cfg.aspect_z.1);
    let e1 = rng.uniform_in(cfg.exponent.0, cfg.exponent.1);
    let e2 = rng.uniform_in(cfg.exponent.0, cfg.exponent.1);
    let nose_len = a * rng.uniform_in(0.4, 0.8);
    let nose_height = c * rng.uniform_in(0.6, 1.1);

    let body_base = [
        rng.uniform_in(0.25, 0.85) as f32,
        rng.uniform_in(0.25, 0.85) as f32,
        rng.uniform_in(0.25, 0.85) as f32,
    ];
    let nose_base = [
        rng.uniform_in(0.25, 0.85) as f32,
        rng.uniform_in(0.25, 0.85) as f32,
        rng.uniform_in(0.25, 0.85) as f32,
    ];

    let (bv, bt) = superellipsoid_mesh(a, b, c, e1, e2, cfg.lat_segments, cfg.lon_segments);
    let jitter = |rng: &mut Rng, base: [f32; 3], lift: f32| {
        let mut out = base;
        for ch in &mut out {
            *ch = (*ch + lift + rng.uniform_in(-0.08, 0.08) as f32).clamp(0.02, 1.0);
        }
        out
    };
    let body_colors: Vec<[f32; 3]> = bt
        .iter()
        .map(|t| {
            // Lighten the upper half so rolls are visible.
            let cz = (bv[t[0]].z + bv[t[1]].z + bv[t[2]].z) / 3.0;
            let lift = if cz > 0.0 { 0.12 } else { 0.0 };
            jitter(rng, body_base, lift)
        })
        .collect();
    let mut mesh = Mesh::new(bv, bt, body_colors, object_id)?;

    // Nose: wedge fused at the +x end, overlapping the body so the composite
    // reads as one piece.
    let (mut wv, wt) = wedge_mesh(nose_len, b * 1.1, nose_height);
    for v in &mut wv {
        *v += Vector3::new(a * 0.75, 0.0, -nose_height * 0.5);
    }
    let nose_colors: Vec<[f32; 3]> = wt.iter().map(|_| jitter(rng, nose_base, 0.0)).collect();
    let nose = Mesh::new(wv, wt, nose_colors, object_id)?;
    mesh.fuse(&nose);
    Ok(mesh)
}

/// Area-weighted uniform surface sample: one uniform picks the triangle by
/// cumulative area, two more pick barycentric coordinates (reflected into
/// the unit triangle).
pub fn sample_surface_point(rng: &mut Rng, mesh: &Mesh) -> Vector3<f64> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for f in 0..mesh.triangles.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    let draw = rng.uniform() * total;
    let face = cumulative.partition_point(|&c| c < draw).min(mesh.triangles.len() - 1);

    let (mut u, mut v) = (rng.uniform(), rng.uniform());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    let [a, b, c] = mesh.triangle_vertices(face);
    a + (b - a) * u + (c - a) * v
}
