//! Dataset persistence: `manifest.json` plus flat little-endian f32 tensors.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json    config, seed, counts, exact f64 tasks/poses, file shapes
//! images.f32       [count, views, 3, h, w]
//! targets.f32      [count, views, h, w]
//! masks.f32        [count, views, h, w]
//! cameras.f32      [count, views]       rig camera index per view
//! keypoints.f32    [count, views, 2]    projected (u, v) per view
//! ```
//!
//! Round-trips are bit-exact: images and masks are stored natively as f32,
//! while targets and projected pixels are *recomputed* on read from the
//! manifest's full-precision poses — the same arithmetic that produced them,
//! so the doubles come back identical. The f32 tensor files exist for
//! external consumers. The manifest is written last so a crashed writer
//! leaves no readable dataset behind.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, Quat};
use crate::heatmap::{make_target, Heatmap};

use super::{Image, KeypointTask, MetaBatch, Pose, SceneConfig, SceneError, View};

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    object: usize,
    point: [f64; 3],
    on_surface: bool,
    base_rotation: Quat,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    rotation: Quat,
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    count: usize,
    /// Views per batch (conditioning + validation).
    views: usize,
    width: usize,
    height: usize,
    config: SceneConfig,
    tasks: Vec<TaskRecord>,
    poses: Vec<Vec<PoseRecord>>,
    cameras: Vec<Vec<usize>>,
    /// Tensor-file shapes, keyed by file name.
    shapes: BTreeMap<String, Vec<usize>>,
}

fn write_f32_file(path: &Path, values: impl Iterator<Item = f32>) -> Result<(), SceneError> {
    let mut out = BufWriter::new(File::create(path)?);
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_f32_file(path: &Path, expected: usize) -> Result<Vec<f32>, SceneError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(SceneError::ShapeMismatch(format!(
            "{}: expected {} f32 values ({} bytes), found {} bytes",
            path.display(),
            expected,
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write `batches` to `dir` (created if needed). All batches must have the
/// same view count and image size as `cfg`.
pub fn write_dataset(
    dir: &Path,
    batches: &[MetaBatch],
    cfg: &SceneConfig,
    seed: u64,
) -> Result<(), SceneError> {
    let views = cfg.l_views + 1;
    let (w, h) = (cfg.width, cfg.height);
    for mb in batches {
        if mb.views.len() != views {
            return Err(SceneError::ShapeMismatch(format!(
                "batch has {} views, config wants {views}",
                mb.views.len()
            )));
        }
        for view in &mb.views {
            if view.image.width != w || view.image.height != h {
                return Err(SceneError::ShapeMismatch(format!(
                    "view image {}x{} vs config {w}x{h}",
                    view.image.width, view.image.height
                )));
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    let count = batches.len();

    let all_views = || batches.iter().flat_map(|mb| mb.views.iter());
    write_f32_file(
        &dir.join("images.f32"),
        all_views().flat_map(|v| v.image.data().iter().copied()),
    )?;
    write_f32_file(
        &dir.join("targets.f32"),
        all_views().flat_map(|v| v.target.data.iter().map(|&x| x as f32)),
    )?;
    write_f32_file(
        &dir.join("masks.f32"),
        all_views().flat_map(|v| v.mask.data.iter().map(|&x| x as f32)),
    )?;
    write_f32_file(&dir.join("cameras.f32"), all_views().map(|v| v.camera as f32))?;
    write_f32_file(
        &dir.join("keypoints.f32"),
        all_views().flat_map(|v| [v.pixel.0 as f32, v.pixel.1 as f32]),
    )?;

    let mut shapes = BTreeMap::new();
    shapes.insert("images.f32".to_string(), vec![count, views, 3, h, w]);
    shapes.insert("targets.f32".to_string(), vec![count, views, h, w]);
    shapes.insert("masks.f32".to_string(), vec![count, views, h, w]);
    shapes.insert("cameras.f32".to_string(), vec![count, views]);
    shapes.insert("keypoints.f32".to_string(), vec![count, views, 2]);

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        count,
        views,
        width: w,
        height: h,
        config: cfg.clone(),
        tasks: batches
            .iter()
            .map(|mb| TaskRecord {
                object: mb.task.object,
                point: mb.task.point.into(),
                on_surface: mb.task.on_surface,
                base_rotation: mb.task.base_rotation,
            })
            .collect(),
        poses: batches
            .iter()
            .map(|mb| {
                mb.views
                    .iter()
                    .map(|v| PoseRecord {
                        rotation: v.pose.rot,
                        translation: v.pose.trans.into(),
                    })
                    .collect()
            })
            .collect(),
        cameras: batches
            .iter()
            .map(|mb| mb.views.iter().map(|v| v.camera).collect())
            .collect(),
        shapes,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| SceneError::CorruptManifest(format!("serialize: {e}")))?;
    // Written last: readers treat its presence as "dataset complete".
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read a dataset directory back into memory. Returns the generating config,
/// the seed, and the batches — bit-identical to what `write_dataset` saw.
pub fn read_dataset(dir: &Path) -> Result<(SceneConfig, u64, Vec<MetaBatch>), SceneError> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| SceneError::CorruptManifest(format!("parse: {e}")))?;
    if m.version != MANIFEST_VERSION {
        return Err(SceneError::CorruptManifest(format!(
            "unsupported version {}",
            m.version
        )));
    }
    if m.tasks.len() != m.count || m.poses.len() != m.count || m.cameras.len() != m.count {
        return Err(SceneError::CorruptManifest(format!(
            "count {} vs {} tasks / {} pose lists / {} camera lists",
            m.count,
            m.tasks.len(),
            m.poses.len(),
            m.cameras.len()
        )));
    }
    if m.width != m.config.width
        || m.height != m.config.height
        || m.views != m.config.l_views + 1
    {
        return Err(SceneError::CorruptManifest(
            "manifest dims disagree with embedded config".into(),
        ));
    }
    for (i, (poses, cams)) in m.poses.iter().zip(&m.cameras).enumerate() {
        if poses.len() != m.views || cams.len() != m.views {
            return Err(SceneError::CorruptManifest(format!(
                "batch {i}: {} poses / {} cameras, want {}",
                poses.len(),
                cams.len(),
                m.views
            )));
        }
    }

    let (w, h) = (m.width, m.height);
    let per_view = 3 * h * w;
    let n_views = m.count * m.views;
    let images = read_f32_file(&dir.join("images.f32"), n_views * per_view)?;
    let masks = read_f32_file(&dir.join("masks.f32"), n_views * h * w)?;
    // Present for external consumers; sizes are still contract-checked.
    read_f32_file(&dir.join("targets.f32"), n_views * h * w)?;
    read_f32_file(&dir.join("cameras.f32"), n_views)?;
    read_f32_file(&dir.join("keypoints.f32"), n_views * 2)?;

    let rig = m.config.rig_cameras();
    let mut batches = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let t = &m.tasks[i];
        if t.object >= m.config.object_count {
            return Err(SceneError::CorruptManifest(format!(
                "batch {i}: object id {} outside library of {}",
                t.object, m.config.object_count
            )));
        }
        let task = KeypointTask {
            object: t.object,
            point: Vector3::from(t.point),
            on_surface: t.on_surface,
            base_rotation: t.base_rotation,
        };
        let mut views = Vec::with_capacity(m.views);
        for j in 0..m.views {
            let camera = m.cameras[i][j];
            let cam = rig.get(camera).ok_or_else(|| {
                SceneError::CorruptManifest(format!(
                    "batch {i} view {j}: camera index {camera} outside rig"
                ))
            })?;
            let rec = &m.poses[i][j];
            let pose = Pose::new(rec.rotation, Vector3::from(rec.translation));
            // Recompute the projection with the stored doubles: identical
            // arithmetic to the generator, hence a bit-exact pixel/target.
            let world = pose.apply(&task.point);
            let pixel = project(cam, &world).map_err(|e| {
                SceneError::CorruptManifest(format!(
                    "batch {i} view {j}: stored pose does not project ({e})"
                ))
            })?;
            let target = make_target(w, h, pixel, m.config.sigma)?;
            let offset = (i * m.views + j) * per_view;
            let image = Image::new(w, h, images[offset..offset + per_view].to_vec())?;
            let moff = (i * m.views + j) * h * w;
            let mask = Heatmap::new(
                w,
                h,
                masks[moff..moff + h * w].iter().map(|&x| x as f64).collect(),
            )?;
            views.push(View { image, target, mask, camera, pixel, pose });
        }
        batches.push(MetaBatch { views, task });
    }
    Ok((m.config, m.seed, batches))
}

/// Binary PPM (P6), 8 bits per channel, values scaled from [0, 1].
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), SceneError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    for v in 0..image.height {
        for u in 0..image.width {
            for c in 0..3 {
                let byte = (image.at(c, u, v).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.write_all(&[byte])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255) into a planar [0, 1] image. `#`
/// comments between header fields are honoured.
pub fn read_ppm(path: &Path) -> Result<Image, SceneError> {
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: &str| SceneError::CorruptManifest(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#'-to-end-of-line comments allowed in between.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then_some((start, pos))
    };

    let (s, e) = token(&bytes).ok_or_else(|| corrupt("missing magic"))?;
    if &bytes[s..e] != b"P6" {
        return Err(corrupt("not a P6 file"));
    }
    let mut field = |name: &str| -> Result<usize, SceneError> {
        let (s, e) = token(&bytes).ok_or_else(|| corrupt(&format!("missing {name}")))?;
        std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt(&format!("bad {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(corrupt("only maxval 255 supported"));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(SceneError::ShapeMismatch(format!(
            "{}: pixel payload truncated ({} of {need} bytes)",
            path.display(),
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut image = Image::filled(width, height, [0.0; 3]);
    let mut idx = pos;
    for v in 0..height {
        for u in 0..width {
            for c in 0..3 {
                image.set(c, u, v, bytes[idx] as f32 / 255.0);
                idx += 1;
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::batch::generate_dataset;

    fn small_cfg() -> SceneConfig {
        SceneConfig { object_count: 2, l_views: 2, ..SceneConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let batches = generate_dataset(&cfg, 41, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &batches, &cfg, 41).unwrap();
        let (rcfg, rseed, rbatches) = read_dataset(dir.path()).unwrap();
        assert_eq!(rcfg, cfg);
        assert_eq!(rseed, 41);
        assert_eq!(rbatches, batches);
    }

    #[test]
    fn truncated_tensor_file_reports_shape_mismatch() {
        let cfg = small_cfg();
        let batches = generate_dataset(&cfg, 43, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &batches, &cfg, 43).unwrap();
        let img_path = dir.path().join("images.f32");
        let len = std::fs::metadata(&img_path).unwrap().len();
        let file = std::fs::OpenOptions::new().write(true).open(&img_path).unwrap();
        file.set_len(len - 4).unwrap();
        match read_dataset(dir.path()) {
            Err(SceneError::ShapeMismatch(msg)) => assert!(msg.contains("images.f32")),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn manifest_count_mismatch_reports_corrupt_manifest() {
        let cfg = small_cfg();
        let batches = generate_dataset(&cfg, 47, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &batches, &cfg, 47).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
        v["count"] = serde_json::json!(3);
        std::fs::write(&mpath, serde_json::to_vec(&v).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(SceneError::CorruptManifest(_)) => {}
            other => panic!("expected CorruptManifest, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_io() {
        let dir = tempfile::tempdir().unwrap();
        match read_dataset(&dir.path().join("nope")) {
            Err(SceneError::Io(_)) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn ppm_round_trip_is_quantisation_exact() {
        let mut image = Image::filled(9, 5, [0.0; 3]);
        for v in 0..5 {
            for u in 0..9 {
                image.set(0, u, v, u as f32 / 8.0);
                image.set(1, u, v, v as f32 / 4.0);
                image.set(2, u, v, ((u + v) % 2) as f32);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &image).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!((back.width, back.height), (9, 5));
        for v in 0..5 {
            for u in 0..9 {
                for c in 0..3 {
                    let a = image.at(c, u, v);
                    let b = back.at(c, u, v);
                    assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "({c},{u},{v}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn ppm_reader_handles_comments_and_rejects_other_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6 # binary\n# full-line comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert!((img.at(0, 0, 0) - 10.0 / 255.0).abs() < 1e-6);
        assert!((img.at(2, 1, 0) - 60.0 / 255.0).abs() < 1e-6);

        std::fs::write(&path, b"P5\n2 1\n255\n abcdef").unwrap();
        assert!(matches!(read_ppm(&path), Err(SceneError::CorruptManifest(_))));
    }
}
