//! `scene.json` manifests and in-memory scene bundles.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::formats::{
    read_flo, read_mask, read_pfm, read_ply, read_png, write_flo, write_mask, write_pfm, write_ply, write_png, Image,
    PointCloud,
};
use crate::error::{Error, Result};
use crate::scene::{Camera, Intrinsics};

pub const MANIFEST_NAME: &str = "scene.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub validation: Vec<FrameEntry>,
    /// Initial point cloud (binary PLY), relative to the scene directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
}

/// One frame; all paths are relative to the scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub id: String,
    pub image: String,
    pub time: f64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// Forward flow towards the next frame of the same list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covisibility: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub camera: Camera<f64>,
    pub image: Image,
    /// Camera-space depth; zero where nothing was hit.
    pub depth: Option<Vec<f32>>,
    /// Raw optical flow `(u, v)` per pixel towards the next frame.
    pub flow: Option<Vec<f32>>,
    pub dynamic_mask: Option<Vec<bool>>,
    pub covisibility: Option<Vec<bool>>,
}

impl Frame {
    pub fn time(&self) -> f64 {
        self.camera.time
    }

    pub fn depth_f64(&self) -> Option<Vec<f64>> {
        self.depth.as_ref().map(|d| d.iter().map(|v| *v as f64).collect())
    }

    pub fn flow_f64(&self) -> Option<Vec<f64>> {
        self.flow.as_ref().map(|d| d.iter().map(|v| *v as f64).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneBundle {
    pub frames: Vec<Frame>,
    pub validation: Vec<Frame>,
    pub points: Option<PointCloud>,
}

impl SceneBundle {
    /// Checks the invariants that do not involve files.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidParameter("scene has no training frames".into()));
        }
        let mut ids = HashSet::new();
        for list in [&self.frames, &self.validation] {
            let mut prev = f64::NEG_INFINITY;
            for f in list.iter() {
                if !ids.insert(f.id.as_str()) {
                    return Err(Error::InvalidParameter(format!("duplicate frame id `{}`", f.id)));
                }
                check_time(f.time(), prev, &f.id)?;
                prev = f.time();
                let (w, h) = (f.camera.width, f.camera.height);
                if f.image.width != w || f.image.height != h {
                    return Err(Error::ShapeMismatch(format!("frame `{}`: image size differs from camera", f.id)));
                }
                let n = w * h;
                let bad = f.depth.as_ref().is_some_and(|d| d.len() != n)
                    || f.flow.as_ref().is_some_and(|d| d.len() != 2 * n)
                    || f.dynamic_mask.as_ref().is_some_and(|d| d.len() != n)
                    || f.covisibility.as_ref().is_some_and(|d| d.len() != n);
                if bad {
                    return Err(Error::ShapeMismatch(format!("frame `{}`: channel size differs from camera", f.id)));
                }
            }
        }
        Ok(())
    }

    pub fn train_cameras(&self) -> Vec<Camera<f64>> {
        self.frames.iter().map(|f| f.camera.clone()).collect()
    }
}

fn check_time(t: f64, prev: f64, id: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("frame `{id}`: timestamp {t} outside [0, 1]")));
    }
    if t <= prev {
        return Err(Error::InvalidParameter(format!(
            "frame `{id}`: timestamp {t} does not increase (previous {prev})"
        )));
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::load(
            &path,
            format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", m.schema_version),
        ));
    }
    if m.frames.is_empty() {
        return Err(Error::load(&path, "manifest lists no frames"));
    }
    let mut ids = HashSet::new();
    for list in [&m.frames, &m.validation] {
        let mut prev = f64::NEG_INFINITY;
        for f in list.iter() {
            if !ids.insert(f.id.as_str()) {
                return Err(Error::load(&path, format!("duplicate frame id `{}`", f.id)));
            }
            check_time(f.time, prev, &f.id).map_err(|e| Error::load(&path, e.to_string()))?;
            prev = f.time;
        }
    }
    Ok(m)
}

fn expect_size(path: &Path, got: (usize, usize), e: &FrameEntry) -> Result<()> {
    if got != (e.width, e.height) {
        return Err(Error::load(
            path,
            format!("size {}x{} does not match frame `{}` ({}x{})", got.0, got.1, e.id, e.width, e.height),
        ));
    }
    Ok(())
}

fn load_frame(dir: &Path, e: &FrameEntry) -> Result<Frame> {
    let camera = Camera::from_matrix(e.intrinsics, &e.world_to_camera, e.width, e.height, e.time)
        .map_err(|err| Error::load(dir.join(MANIFEST_NAME), format!("frame `{}`: {err}", e.id)))?;
    let p = dir.join(&e.image);
    let image = read_png(&p)?;
    expect_size(&p, (image.width, image.height), e)?;
    let depth = match &e.depth {
        Some(rel) => {
            let p = dir.join(rel);
            let (w, h, d) = read_pfm(&p)?;
            expect_size(&p, (w, h), e)?;
            Some(d)
        }
        None => None,
    };
    let flow = match &e.flow {
        Some(rel) => {
            let p = dir.join(rel);
            let (w, h, d) = read_flo(&p)?;
            expect_size(&p, (w, h), e)?;
            Some(d)
        }
        None => None,
    };
    let mask = |rel: &Option<String>| -> Result<Option<Vec<bool>>> {
        match rel {
            Some(rel) => {
                let p = dir.join(rel);
                let (w, h, m) = read_mask(&p)?;
                expect_size(&p, (w, h), e)?;
                Ok(Some(m))
            }
            None => Ok(None),
        }
    };
    Ok(Frame {
        id: e.id.clone(),
        camera,
        image,
        depth,
        flow,
        dynamic_mask: mask(&e.dynamic_mask)?,
        covisibility: mask(&e.covisibility)?,
    })
}

/// Reads and validates a scene directory. Frames decode in parallel.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let m = read_manifest(dir)?;
    let load = |list: &[FrameEntry]| list.par_iter().map(|e| load_frame(dir, e)).collect::<Result<Vec<_>>>();
    let frames = load(&m.frames)?;
    let validation = load(&m.validation)?;
    let points = match &m.points {
        Some(rel) => Some(read_ply(&dir.join(rel))?),
        None => None,
    };
    Ok(SceneBundle { frames, validation, points })
}

fn entry(f: &Frame) -> FrameEntry {
    let c = &f.camera;
    let id = &f.id;
    FrameEntry {
        id: id.clone(),
        image: format!("images/{id}.png"),
        time: c.time,
        width: c.width,
        height: c.height,
        intrinsics: c.intrinsics(),
        world_to_camera: c.matrix(),
        depth: f.depth.as_ref().map(|_| format!("depth/{id}.pfm")),
        flow: f.flow.as_ref().map(|_| format!("flow/{id}.flo")),
        dynamic_mask: f.dynamic_mask.as_ref().map(|_| format!("masks/{id}.png")),
        covisibility: f.covisibility.as_ref().map(|_| format!("covisibility/{id}.png")),
    }
}

fn save_frame(dir: &Path, f: &Frame, e: &FrameEntry) -> Result<()> {
    let (w, h) = (f.camera.width, f.camera.height);
    write_png(&dir.join(&e.image), &f.image)?;
    if let (Some(d), Some(rel)) = (&f.depth, &e.depth) {
        write_pfm(&dir.join(rel), w, h, d)?;
    }
    if let (Some(d), Some(rel)) = (&f.flow, &e.flow) {
        write_flo(&dir.join(rel), w, h, d)?;
    }
    if let (Some(m), Some(rel)) = (&f.dynamic_mask, &e.dynamic_mask) {
        write_mask(&dir.join(rel), w, h, m)?;
    }
    if let (Some(m), Some(rel)) = (&f.covisibility, &e.covisibility) {
        write_mask(&dir.join(rel), w, h, m)?;
    }
    Ok(())
}

/// Writes the bundle and its manifest. Images are stored with 8 bits per
/// channel, so only bundles with quantized images round-trip exactly.
pub fn save_scene(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    bundle.validate()?;
    let frames: Vec<FrameEntry> = bundle.frames.iter().map(entry).collect();
    let validation: Vec<FrameEntry> = bundle.validation.iter().map(entry).collect();
    for (f, e) in bundle.frames.iter().zip(&frames).chain(bundle.validation.iter().zip(&validation)) {
        save_frame(dir, f, e)?;
    }
    let points = match &bundle.points {
        Some(p) => {
            write_ply(&dir.join("points.ply"), p)?;
            Some("points.ply".to_string())
        }
        None => None,
    };
    let m = Manifest { schema_version: SCHEMA_VERSION, frames, validation, points };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LintReport {
    pub frames: usize,
    pub validation: usize,
    pub points: usize,
    pub with_depth: usize,
    pub with_flow: usize,
    pub with_dynamic_mask: usize,
    pub with_covisibility: usize,
}

/// Loads the scene fully and summarizes which channels are present.
pub fn lint_scene(dir: &Path) -> Result<LintReport> {
    let b = load_scene(dir)?;
    let all = || b.frames.iter().chain(&b.validation);
    Ok(LintReport {
        frames: b.frames.len(),
        validation: b.validation.len(),
        points: b.points.as_ref().map_or(0, |p| p.len()),
        with_depth: all().filter(|f| f.depth.is_some()).count(),
        with_flow: all().filter(|f| f.flow.is_some()).count(),
        with_dynamic_mask: all().filter(|f| f.dynamic_mask.is_some()).count(),
        with_covisibility: all().filter(|f| f.covisibility.is_some()).count(),
    })
}

/// Path of the manifest inside a scene directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    fn frame(id: &str, t: f64) -> Frame {
        let intr = Intrinsics { fx: 10.0, fy: 10.0, cx: 2.0, cy: 1.5 };
        let camera =
            Camera::look_at(intr, Vec3::new(t, 0.0, -3.0), Vec3::zero(), Vec3::new(0.0, -1.0, 0.0), 4, 3, t).unwrap();
        let image = Image::new(4, 3, (0..36).map(|i| i as f64 / 35.0).collect()).unwrap().quantized();
        Frame {
            id: id.into(),
            camera,
            image,
            depth: Some((0..12).map(|i| 1.0 + i as f32 * 0.1).collect()),
            flow: None,
            dynamic_mask: None,
            covisibility: None,
        }
    }

    fn minimal() -> SceneBundle {
        SceneBundle { frames: vec![frame("a", 0.0), frame("b", 1.0)], validation: vec![], points: None }
    }

    #[test]
    fn minimal_scene_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &minimal()).unwrap();
        let b = load_scene(dir.path()).unwrap();
        assert_eq!(b.frames.len(), 2);
        assert!(b.frames[0].flow.is_none());
        assert_eq!(b, minimal());
    }

    #[test]
    fn missing_depth_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &minimal()).unwrap();
        std::fs::remove_file(dir.path().join("depth/b.pfm")).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("depth/b.pfm"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &minimal()).unwrap();
        let p = manifest_path(dir.path());
        let mut m = read_manifest(dir.path()).unwrap();
        m.frames[1].time = 0.0;
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene.json") && err.contains("does not increase"), "{err}");
    }

    #[test]
    fn size_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &minimal()).unwrap();
        let mut other = frame("x", 0.0);
        other.image = Image::new(2, 2, vec![0.0; 12]).unwrap();
        write_png(&dir.path().join("images/a.png"), &other.image).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("images/a.png") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(manifest_path(dir.path()), "{\"schema_version\": 1, \"frames\": [{}]}").unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene.json"), "{err}");
        std::fs::write(manifest_path(dir.path()), "{\"schema_version\": 9, \"frames\": []}").unwrap();
        assert!(load_scene(dir.path()).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn non_rigid_pose_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &minimal()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.frames[0].world_to_camera[0][0] = 2.0;
        std::fs::write(manifest_path(dir.path()), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame `a`"), "{err}");
    }

    #[test]
    fn lint_counts_channels() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = minimal();
        b.validation.push(frame("v", 0.5));
        b.points = Some(PointCloud { positions: vec![[0.0; 3]], colors: vec![[1, 2, 3]] });
        save_scene(dir.path(), &b).unwrap();
        let r = lint_scene(dir.path()).unwrap();
        assert_eq!((r.frames, r.validation, r.points, r.with_depth, r.with_flow), (2, 1, 1, 3, 0));
    }
}
