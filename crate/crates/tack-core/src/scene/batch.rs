//! Task sampling, meta-batch assembly, and pad-and-crop augmentation.
//!
//! A meta-batch is built view by view: draw a camera, resample the object
//! pose until the task point projects inside the (margin-shrunk) FOV, drop
//! in freshly-posed distractors, render, add pixel noise, and attach the
//! Gaussian target. Every random draw comes from one `Rng` passed down, so a
//! batch is a pure function of its stream.

use nalgebra::Vector3;

use crate::geometry::{in_fov, project, sample_task_pose, Aabb, Camera, Quat};
use crate::heatmap::{make_target, Heatmap};
use crate::rng::Rng;

use super::mesh::{make_object, sample_surface_point, Mesh};
use super::raster::render;
use super::{Image, KeypointTask, MetaBatch, Pose, SceneConfig, SceneError, View};

/// Proposal cap for background-point rejection sampling.
pub const REJECTION_BUDGET: usize = 10_000;

/// Stream index reserved for the object library (batch workers use their
/// batch index, so keep this far away from small integers).
const STREAM_OBJECTS: u64 = u64::MAX;

/// Isotropic Gaussian offset from `x`: one normal draw per axis (x, y, z).
/// `sigma = 0` returns `x` exactly (draws are still consumed).
pub fn sample_offsurface_point(rng: &mut Rng, x: &Vector3<f64>, sigma: f64) -> Vector3<f64> {
    Vector3::new(
        x.x + sigma * rng.normal(),
        x.y + sigma * rng.normal(),
        x.z + sigma * rng.normal(),
    )
}

/// Uniform proposals from `bbox` (world frame), accepted once the proposal's
/// projected pixel lands on background in *every* camera. Projections
/// off-image or behind a camera count as background. The object's masks are
/// rendered once per camera, without distractors.
pub fn sample_near_object_rejection(
    rng: &mut Rng,
    mesh: &Mesh,
    pose: &Pose,
    cams: &[Camera],
    bbox: &Aabb,
) -> Result<Vector3<f64>, SceneError> {
    let masks: Vec<Heatmap> = cams
        .iter()
        .map(|cam| render(mesh, pose, cam, [0.0; 3], &[]).map(|(_, m, _)| m))
        .collect::<Result<_, _>>()?;
    'proposals: for _ in 0..REJECTION_BUDGET {
        let p = bbox.sample(rng);
        for (cam, mask) in cams.iter().zip(&masks) {
            let Ok((u, v)) = project(cam, &p) else {
                continue; // behind this camera: background here
            };
            let (ui, vi) = (u.round(), v.round());
            if ui < 0.0 || vi < 0.0 || ui >= cam.width as f64 || vi >= cam.height as f64 {
                continue;
            }
            if mask.at(ui as usize, vi as usize) > 0.5 {
                continue 'proposals;
            }
        }
        return Ok(p);
    }
    Err(SceneError::RejectionBudgetExceeded(REJECTION_BUDGET))
}

/// Draw one task: pick an object, sample a surface point, optionally push it
/// off-surface, and fix the base orientation the per-view sampler perturbs.
pub fn sample_task(rng: &mut Rng, meshes: &[Mesh], cfg: &SceneConfig) -> KeypointTask {
    let object = rng.below(meshes.len() as u64) as usize;
    let surface = sample_surface_point(rng, &meshes[object]);
    let (point, on_surface) = if cfg.offsurface_sigma > 0.0 {
        (sample_offsurface_point(rng, &surface, cfg.offsurface_sigma), false)
    } else {
        (surface, true)
    };
    KeypointTask { object, point, on_surface, base_rotation: Quat::random_uniform(rng) }
}

/// Assemble `cfg.l_views + 1` views of one task (the last is the validation
/// view). Poses are correlated through the task's base rotation; any view
/// whose projected keypoint leaves the margin-shrunk FOV is resampled, up to
/// `cfg.fov_budget` attempts.
pub fn build_meta_batch(
    rng: &mut Rng,
    task: &KeypointTask,
    meshes: &[Mesh],
    cams: &[Camera],
    cfg: &SceneConfig,
) -> Result<MetaBatch, SceneError> {
    let params = cfg.pose_params();
    let n_views = cfg.l_views + 1;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let camera = rng.below(cams.len() as u64) as usize;
        let cam = &cams[camera];

        let mut found = None;
        for _ in 0..cfg.fov_budget {
            let (q, t) = sample_task_pose(rng, &task.base_rotation, cfg.pose_std, &params);
            let pose = Pose::new(q, t);
            let world = pose.apply(&task.point);
            if let Ok(uv) = project(cam, &world) {
                if in_fov(cam, uv, cfg.fov_margin_px) {
                    found = Some((pose, uv));
                    break;
                }
            }
        }
        let (pose, pixel) = found.ok_or(SceneError::FovBudgetExceeded(cfg.fov_budget))?;

        let placed: Vec<(usize, Pose)> = (0..cfg.distractors)
            .map(|_| {
                let idx = rng.below(meshes.len() as u64) as usize;
                let q = Quat::random_uniform(rng);
                let t = params.translation.sample(rng);
                (idx, Pose::new(q, t))
            })
            .collect();
        let distractors: Vec<(&Mesh, Pose)> =
            placed.iter().map(|&(i, p)| (&meshes[i], p)).collect();

        let (mut image, mask, _) =
            render(&meshes[task.object], &pose, cam, cfg.background, &distractors)?;
        if cfg.noise > 0.0 {
            for v in image.data_mut() {
                *v = (*v as f64 + cfg.noise * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
        let target = make_target(cfg.width, cfg.height, pixel, cfg.sigma)?;
        views.push(View { image, target, mask, camera, pixel, pose });
    }
    Ok(MetaBatch { views, task: *task })
}

/// One frozen scene photographed by the whole rig: the object (and its
/// distractors) sit at a single world pose while every camera renders
/// simultaneously, so the task point occupies one consistent 3D position —
/// the setting a multi-view 3D readout needs. Contrast with
/// [`build_meta_batch`], whose views each re-perturb the pose for training
/// diversity.
#[derive(Debug, Clone)]
pub struct TrackingInstant {
    /// One view per rig camera, in rig order, all sharing `pose`.
    pub views: Vec<View>,
    /// Task point in the world frame.
    pub world: Vector3<f64>,
}

/// Pose the task so its point projects inside every camera's margin-shrunk
/// FOV (up to `cfg.fov_budget` resamples), then render all cameras.
pub fn tracking_instant(
    rng: &mut Rng,
    task: &KeypointTask,
    meshes: &[Mesh],
    cams: &[Camera],
    cfg: &SceneConfig,
) -> Result<TrackingInstant, SceneError> {
    let params = cfg.pose_params();
    let mut found = None;
    'poses: for _ in 0..cfg.fov_budget {
        let (q, t) = sample_task_pose(rng, &task.base_rotation, cfg.pose_std, &params);
        let pose = Pose::new(q, t);
        let world = pose.apply(&task.point);
        let mut pixels = Vec::with_capacity(cams.len());
        for cam in cams {
            let Ok(uv) = project(cam, &world) else { continue 'poses };
            if !in_fov(cam, uv, cfg.fov_margin_px) {
                continue 'poses;
            }
            pixels.push(uv);
        }
        found = Some((pose, world, pixels));
        break;
    }
    let (pose, world, pixels) = found.ok_or(SceneError::FovBudgetExceeded(cfg.fov_budget))?;

    // Distractors are part of the frozen scene, placed once for all views.
    let placed: Vec<(usize, Pose)> = (0..cfg.distractors)
        .map(|_| {
            let idx = rng.below(meshes.len() as u64) as usize;
            let q = Quat::random_uniform(rng);
            let t = params.translation.sample(rng);
            (idx, Pose::new(q, t))
        })
        .collect();
    let distractors: Vec<(&Mesh, Pose)> = placed.iter().map(|&(i, p)| (&meshes[i], p)).collect();

    let mut views = Vec::with_capacity(cams.len());
    for (camera, (cam, &pixel)) in cams.iter().zip(&pixels).enumerate() {
        let (mut image, mask, _) =
            render(&meshes[task.object], &pose, cam, cfg.background, &distractors)?;
        if cfg.noise > 0.0 {
            for v in image.data_mut() {
                *v = (*v as f64 + cfg.noise * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
        let target = make_target(cfg.width, cfg.height, pixel, cfg.sigma)?;
        views.push(View { image, target, mask, camera, pixel, pose });
    }
    Ok(TrackingInstant { views, world })
}

/// The procedural object library for `(cfg, seed)` — shared by dataset
/// generation, online training, and evaluation so object identities line up.
pub fn object_library(cfg: &SceneConfig, seed: u64) -> Result<Vec<Mesh>, SceneError> {
    let root = Rng::new(seed).derive(STREAM_OBJECTS);
    (0..cfg.object_count)
        .map(|i| make_object(&mut root.derive(i as u64), &cfg.object, i))
        .collect()
}

/// Batch `index` of the stream `(cfg, seed)` — task plus views. Dataset
/// generation and online training both call this, so a dataset written with
/// some seed replays exactly what an online run with that seed would see.
pub fn generate_batch(
    cfg: &SceneConfig,
    seed: u64,
    index: u64,
    meshes: &[Mesh],
    cams: &[Camera],
) -> Result<MetaBatch, SceneError> {
    let mut rng = Rng::new(seed).derive(index);
    let task = sample_task(&mut rng, meshes, cfg);
    build_meta_batch(&mut rng, &task, meshes, cams, cfg)
}

/// Generate `count` meta-batches. Workers run in parallel; each derives its
/// own stream from the batch index, so output is identical at any thread
/// count.
pub fn generate_dataset(
    cfg: &SceneConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<MetaBatch>, SceneError> {
    cfg.validate()?;
    let meshes = object_library(cfg, seed)?;
    let cams = cfg.rig_cameras();
    crate::parallel::map_indexed(count, |i| generate_batch(cfg, seed, i as u64, &meshes, &cams))
        .into_iter()
        .collect()
}

/// Pad by `pad` zeros on every side, then crop back to the original size at
/// offset `(ox, oy)` (both in `0..=2*pad`). Pixel `(u, v)` of the output is
/// padded pixel `(u + ox, v + oy)`, i.e. content shifts by `pad − offset`.
pub fn apply_pad_crop(
    image: &Image,
    target: &Heatmap,
    mask: &Heatmap,
    pad: usize,
    ox: usize,
    oy: usize,
) -> (Image, Heatmap, Heatmap) {
    assert!(ox <= 2 * pad && oy <= 2 * pad, "crop offset outside padded image");
    let (w, h) = (image.width, image.height);
    let (dx, dy) = (ox as isize - pad as isize, oy as isize - pad as isize);

    let mut out_img = Image::filled(w, h, [0.0; 3]);
    let mut out_tgt = Heatmap::zeros(w, h);
    let mut out_mask = Heatmap::zeros(w, h);
    for v in 0..h {
        let sv = v as isize + dy;
        if sv < 0 || sv >= h as isize {
            continue;
        }
        for u in 0..w {
            let su = u as isize + dx;
            if su < 0 || su >= w as isize {
                continue;
            }
            let (su, sv) = (su as usize, sv as usize);
            for c in 0..3 {
                out_img.set(c, u, v, image.at(c, su, sv));
            }
            *out_tgt.at_mut(u, v) = target.at(su, sv);
            *out_mask.at_mut(u, v) = mask.at(su, sv);
        }
    }
    (out_img, out_tgt, out_mask)
}

/// Random pad-and-crop: one crop offset drawn per call (x then y), applied
/// identically to image, target, and mask. `pad = 0` is the identity.
pub fn augment_pad_crop(
    rng: &mut Rng,
    image: &Image,
    target: &Heatmap,
    mask: &Heatmap,
    pad: usize,
) -> (Image, Heatmap, Heatmap) {
    if pad == 0 {
        return (image.clone(), target.clone(), mask.clone());
    }
    let ox = rng.below(2 * pad as u64 + 1) as usize;
    let oy = rng.below(2 * pad as u64 + 1) as usize;
    apply_pad_crop(image, target, mask, pad, ox, oy)
}

/// Augment a whole view, updating its nominal pixel by the crop shift. The
/// camera/pose fields keep describing the *unaugmented* render.
pub fn augment_view(rng: &mut Rng, view: &View, pad: usize) -> View {
    if pad == 0 {
        return view.clone();
    }
    let ox = rng.below(2 * pad as u64 + 1) as usize;
    let oy = rng.below(2 * pad as u64 + 1) as usize;
    let (image, target, mask) = apply_pad_crop(&view.image, &view.target, &view.mask, pad, ox, oy);
    let shift = (pad as f64 - ox as f64, pad as f64 - oy as f64);
    View {
        image,
        target,
        mask,
        camera: view.camera,
        pixel: (view.pixel.0 + shift.0, view.pixel.1 + shift.1),
        pose: view.pose,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryError;
    use crate::heatmap::soft_argmax;

    fn small_cfg() -> SceneConfig {
        SceneConfig { object_count: 3, ..SceneConfig::default() }
    }

    #[test]
    fn offsurface_sigma_zero_is_exact() {
        let x = Vector3::new(0.3, -0.1, 0.7);
        let p = sample_offsurface_point(&mut Rng::new(1), &x, 0.0);
        assert_eq!(p, x);
    }

    #[test]
    fn offsurface_moments_match_gaussian() {
        let mut rng = Rng::new(2);
        let sigma = 0.05;
        let n = 10_000;
        let origin = Vector3::zeros();
        let mut sq = Vector3::zeros();
        let mut norm_sum = 0.0;
        for _ in 0..n {
            let p = sample_offsurface_point(&mut rng, &origin, sigma);
            sq += p.component_mul(&p);
            norm_sum += p.norm();
        }
        for axis in 0..3 {
            let std = (sq[axis] / n as f64).sqrt();
            assert!((std - sigma).abs() / sigma < 0.05, "axis {axis}: std {std}");
        }
        // Mean offset norm of an isotropic 3D Gaussian is sigma * sqrt(8/pi).
        let expected = sigma * (8.0 / std::f64::consts::PI).sqrt();
        let mean_norm = norm_sum / n as f64;
        assert!((mean_norm - expected).abs() / expected < 0.05, "mean norm {mean_norm}");
    }

    #[test]
    fn rejection_accepts_first_proposal_when_object_is_out_of_view() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 3).unwrap();
        let cams = cfg.rig_cameras();
        // Park the object far outside every frustum: all masks are empty.
        let pose = Pose::new(Quat::identity(), Vector3::new(50.0, 0.0, 0.0));
        let bbox = Aabb::new(Vector3::new(-0.1, -0.1, -0.1), Vector3::new(0.1, 0.1, 0.1));
        let p = sample_near_object_rejection(&mut Rng::new(4), &meshes[0], &pose, &cams, &bbox)
            .unwrap();
        // Exactly one proposal drawn: matches the first box sample.
        let first = bbox.sample(&mut Rng::new(4));
        assert_eq!(p, first);
    }

    #[test]
    fn rejection_exhausts_when_box_is_inside_the_silhouette() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 5).unwrap();
        let cams = cfg.rig_cameras();
        let pose = Pose::identity();
        // A millimetre-scale box buried in the object's interior projects
        // onto its silhouette from every ring camera.
        let e = 1e-3;
        let bbox = Aabb::new(Vector3::new(-e, -e, -e), Vector3::new(e, e, e));
        match sample_near_object_rejection(&mut Rng::new(6), &meshes[0], &pose, &cams, &bbox) {
            Err(SceneError::RejectionBudgetExceeded(n)) => assert_eq!(n, REJECTION_BUDGET),
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn rejection_accepted_points_project_to_background() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 7).unwrap();
        let cams = cfg.rig_cameras();
        let pose = Pose::identity();
        let bbox = Aabb::new(Vector3::new(-0.5, -0.5, -0.2), Vector3::new(0.5, 0.5, 0.4));
        let masks: Vec<Heatmap> = cams
            .iter()
            .map(|cam| render(&meshes[0], &pose, cam, [0.0; 3], &[]).unwrap().1)
            .collect();
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let p = sample_near_object_rejection(&mut rng, &meshes[0], &pose, &cams, &bbox)
                .unwrap();
            for (cam, mask) in cams.iter().zip(&masks) {
                match project(cam, &p) {
                    Err(GeometryError::NonPositiveDepth) => {}
                    Err(e) => panic!("unexpected projection error {e:?}"),
                    Ok((u, v)) => {
                        let (ui, vi) = (u.round(), v.round());
                        if ui >= 0.0
                            && vi >= 0.0
                            && ui < cam.width as f64
                            && vi < cam.height as f64
                        {
                            assert_eq!(mask.at(ui as usize, vi as usize), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn task_points_respect_the_surface_flag() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 9).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..20 {
            let task = sample_task(&mut rng, &meshes, &cfg);
            assert!(task.on_surface);
            assert!(meshes[task.object].contains_surface_point(&task.point, 1e-9));
        }
        let off_cfg = SceneConfig { offsurface_sigma: 0.05, ..small_cfg() };
        let task = sample_task(&mut rng, &meshes, &off_cfg);
        assert!(!task.on_surface);
    }

    #[test]
    fn batch_targets_peak_at_the_projected_keypoint() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 11).unwrap();
        let cams = cfg.rig_cameras();
        let mb = generate_batch(&cfg, 11, 0, &meshes, &cams).unwrap();
        assert_eq!(mb.views.len(), cfg.l_views + 1);
        for view in &mb.views {
            // Alignment invariant: the stored pixel is the exact projection.
            let world = view.pose.apply(&mb.task.point);
            let (u, v) = project(&cams[view.camera], &world).unwrap();
            assert!((u - view.pixel.0).abs() < 1e-6 && (v - view.pixel.1).abs() < 1e-6);
            // The target is the Gaussian at that pixel, bit for bit.
            let expected = make_target(cfg.width, cfg.height, view.pixel, cfg.sigma).unwrap();
            assert_eq!(view.target, expected);
            // Its argmax pixel is the rounded projection (margin keeps the
            // peak interior).
            let peak = view
                .target
                .data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (pu, pv) = (peak % cfg.width, peak / cfg.width);
            assert_eq!(pu as f64, u.round());
            assert_eq!(pv as f64, v.round());
        }
    }

    /// In-batch poses share a base rotation, so their mean pairwise geodesic
    /// distance sits well below that of independent uniform rotations.
    #[test]
    fn batch_poses_are_correlated() {
        let cfg = SceneConfig { l_views: 15, ..small_cfg() };
        let meshes = object_library(&cfg, 13).unwrap();
        let cams = cfg.rig_cameras();
        let mb = generate_batch(&cfg, 13, 0, &meshes, &cams).unwrap();
        let rots: Vec<Quat> = mb.views.iter().map(|v| v.pose.rot).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..rots.len() {
            for j in i + 1..rots.len() {
                sum += rots[i].geodesic_angle(&rots[j]);
                pairs += 1;
            }
        }
        let batch_mean = sum / pairs as f64;

        // Monte-Carlo baseline: independent uniform rotation pairs.
        let mut rng = Rng::new(99);
        let mut base_sum = 0.0;
        let n = 4000;
        for _ in 0..n {
            let a = Quat::random_uniform(&mut rng);
            let b = Quat::random_uniform(&mut rng);
            base_sum += a.geodesic_angle(&b);
        }
        let baseline = base_sum / n as f64;
        assert!(
            batch_mean < baseline - 0.3,
            "batch mean {batch_mean:.3} vs independent baseline {baseline:.3}"
        );
    }

    #[test]
    fn batches_are_bit_identical_per_seed() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 17).unwrap();
        let cams = cfg.rig_cameras();
        let a = generate_batch(&cfg, 17, 5, &meshes, &cams).unwrap();
        let b = generate_batch(&cfg, 17, 5, &meshes, &cams).unwrap();
        assert_eq!(a, b);
        let c = generate_batch(&cfg, 17, 6, &meshes, &cams).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_fov_margin_exhausts_the_budget() {
        let cfg = SceneConfig { fov_margin_px: 1e6, ..small_cfg() };
        let meshes = object_library(&cfg, 19).unwrap();
        let cams = cfg.rig_cameras();
        match generate_batch(&cfg, 19, 0, &meshes, &cams) {
            Err(SceneError::FovBudgetExceeded(n)) => assert_eq!(n, cfg.fov_budget),
            other => panic!("expected FOV exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn pad_zero_is_identity_and_center_crop_restores() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 21).unwrap();
        let cams = cfg.rig_cameras();
        let mb = generate_batch(&cfg, 21, 0, &meshes, &cams).unwrap();
        let v = &mb.views[0];

        let (img, tgt, mask) =
            augment_pad_crop(&mut Rng::new(1), &v.image, &v.target, &v.mask, 0);
        assert_eq!(img, v.image);
        assert_eq!(tgt, v.target);
        assert_eq!(mask, v.mask);

        let (img, tgt, mask) = apply_pad_crop(&v.image, &v.target, &v.mask, 8, 8, 8);
        assert_eq!(img, v.image);
        assert_eq!(tgt, v.target);
        assert_eq!(mask, v.mask);
    }

    #[test]
    fn crop_shifts_soft_argmax_by_pad_minus_offset() {
        // Interior keypoint: the Gaussian is far from every border, so the
        // readout shift is exact to well under 0.1 px.
        let (w, h, sigma) = (64, 48, 2.0);
        let target = make_target(w, h, (30.0, 25.0), sigma).unwrap();
        let image = Image::filled(w, h, [0.2, 0.3, 0.4]);
        let mask = Heatmap::zeros(w, h);
        // `soft_argmax` reads logits, so feed it the log of the activation map
        // (zeros from the crop become -inf and drop out of the softmax).
        let base = soft_argmax(&target.ln());
        let pad = 8;
        for (ox, oy) in [(0, 0), (3, 12), (16, 1), (7, 9)] {
            let (_, tgt, _) = apply_pad_crop(&image, &target, &mask, pad, ox, oy);
            let got = soft_argmax(&tgt.ln());
            let want = (
                base.0 + pad as f64 - ox as f64,
                base.1 + pad as f64 - oy as f64,
            );
            assert!(
                (got.0 - want.0).abs() < 0.1 && (got.1 - want.1).abs() < 0.1,
                "offset ({ox},{oy}): got {got:?}, want {want:?}"
            );
        }
    }

    #[test]
    fn crop_applies_the_same_shift_to_all_three_planes() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 23).unwrap();
        let cams = cfg.rig_cameras();
        let mb = generate_batch(&cfg, 23, 1, &meshes, &cams).unwrap();
        let v = &mb.views[0];
        let (img, tgt, mask) = apply_pad_crop(&v.image, &v.target, &v.mask, 8, 3, 13);
        // (dx, dy) = (3-8, 13-8) = (-5, 5): output (u,v) = source (u-5, v+5).
        for (u, vpix) in [(20, 10), (40, 30), (33, 22)] {
            let (su, sv) = (u - 5, vpix + 5);
            assert_eq!(img.at(0, u, vpix), v.image.at(0, su, sv));
            assert_eq!(tgt.at(u, vpix), v.target.at(su, sv));
            assert_eq!(mask.at(u, vpix), v.mask.at(su, sv));
        }
    }

    #[test]
    fn augment_view_updates_the_nominal_pixel() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 25).unwrap();
        let cams = cfg.rig_cameras();
        let mb = generate_batch(&cfg, 25, 2, &meshes, &cams).unwrap();
        let v = &mb.views[1];
        let av = augment_view(&mut Rng::new(77), v, 8);
        // The same draws reproduce the offset, hence the expected shift.
        let mut rng = Rng::new(77);
        let ox = rng.below(17) as f64;
        let oy = rng.below(17) as f64;
        // Parenthesised to match the implementation's grouping bit-for-bit.
        assert_eq!(av.pixel.0, v.pixel.0 + (8.0 - ox));
        assert_eq!(av.pixel.1, v.pixel.1 + (8.0 - oy));
        // And the target peak moved with it (when still interior). The log
        // turns the activation map into the logits `soft_argmax` expects.
        let got = soft_argmax(&av.target.ln());
        if av.pixel.0 > 12.0
            && av.pixel.0 < cfg.width as f64 - 13.0
            && av.pixel.1 > 12.0
            && av.pixel.1 < cfg.height as f64 - 13.0
        {
            assert!((got.0 - av.pixel.0).abs() < 0.1);
            assert!((got.1 - av.pixel.1).abs() < 0.1);
        }
    }

    #[test]
    fn dataset_generation_is_deterministic_and_index_separable() {
        let cfg = SceneConfig { object_count: 2, l_views: 2, ..SceneConfig::default() };
        let a = generate_dataset(&cfg, 31, 6).unwrap();
        let b = generate_dataset(&cfg, 31, 6).unwrap();
        assert_eq!(a, b);
        // Each batch equals an independent single-batch generation at its
        // index (the parallel map cannot leak state across workers).
        let meshes = object_library(&cfg, 31).unwrap();
        let cams = cfg.rig_cameras();
        for (i, mb) in a.iter().enumerate() {
            let solo = generate_batch(&cfg, 31, i as u64, &meshes, &cams).unwrap();
            assert_eq!(*mb, solo);
        }
    }

    #[test]
    fn tracking_instant_freezes_one_pose_across_the_rig() {
        let cfg = small_cfg();
        let meshes = object_library(&cfg, 41).unwrap();
        let cams = cfg.rig_cameras();
        let mut rng = Rng::new(9);
        let task = sample_task(&mut rng, &meshes, &cfg);
        let inst = tracking_instant(&mut rng, &task, &meshes, &cams, &cfg).unwrap();
        assert_eq!(inst.views.len(), cams.len());
        let pose = inst.views[0].pose;
        for (i, v) in inst.views.iter().enumerate() {
            assert_eq!(v.pose, pose, "view {i} re-perturbed the pose");
            assert_eq!(v.camera, i);
            // The nominal pixel is exactly the reprojection of the shared
            // world point.
            let uv = project(&cams[i], &inst.world).unwrap();
            assert_eq!(v.pixel, uv);
        }
        assert_eq!(inst.world, pose.apply(&task.point));

        // Ideal detections (the rendered targets as logits) triangulate back
        // to the world point.
        let heatmaps: Vec<Heatmap> = inst.views.iter().map(|v| v.target.ln()).collect();
        let out = crate::geometry::best_subset_triangulate(&cams, &heatmaps).unwrap();
        assert!(
            (out.point - inst.world).norm() < 1e-3,
            "triangulated {:?} vs world {:?}",
            out.point,
            inst.world
        );
    }
}
