//! Ray-cast synthetic dynamic scenes with exact depth, flow, dynamic masks
//! and covisibility.
//!
//! Objects are textured ellipsoids and quads with a fixed orientation that
//! translate linearly in time. Every channel is evaluated at pixel centers
//! except color, which averages a 2x2 grid of sub-samples.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::formats::{quantize8, Image, PointCloud};
use super::scene::{save_scene, Frame, SceneBundle};
use crate::densify::UNKNOWN_FLOW;
use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_mat, Mat3, Vec3};
use crate::scene::{Camera, Intrinsics};

pub const GROUND_TRUTH_NAME: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid { radii: [f64; 3] },
    /// Two-sided rectangle in the local xy plane.
    Quad { half_extent: [f64; 2] },
}

/// `color_c = base_c + amplitude * sin(frequency * local_c + 2.1 c)`,
/// clamped to `[0, 1]`, where `local` is the object-space hit point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub shape: Shape,
    /// Center at time 0.
    pub center: [f64; 3],
    /// Orientation `(w, x, y, z)`; normalized on use.
    pub rotation: [f64; 4],
    /// World units per unit of normalized time.
    pub velocity: [f64; 3],
    pub texture: Texture,
}

impl SynthObject {
    pub fn is_static(&self) -> bool {
        self.velocity == [0.0; 3]
    }

    pub fn center_at(&self, t: f64) -> Vec3<f64> {
        Vec3(self.center) + Vec3(self.velocity) * t
    }

    pub fn rotation_matrix(&self) -> Mat3<f64> {
        quat_to_mat(&quat_normalize(&self.rotation))
    }

    pub fn color(&self, local: &Vec3<f64>) -> [f64; 3] {
        let tex = &self.texture;
        std::array::from_fn(|c| (tex.base[c] + tex.amplitude * (tex.frequency * local[c] + 2.1 * c as f64).sin()).clamp(0.0, 1.0))
    }

    /// Smallest positive ray parameter of the hit, with the object-space
    /// hit point.
    fn intersect(&self, origin: &Vec3<f64>, dir: &Vec3<f64>, t: f64) -> Option<(f64, Vec3<f64>)> {
        let rt = self.rotation_matrix().transpose();
        let o = rt.mul_vec(&(*origin - self.center_at(t)));
        let d = rt.mul_vec(dir);
        let s = match &self.shape {
            Shape::Ellipsoid { radii } => {
                let os = Vec3::new(o[0] / radii[0], o[1] / radii[1], o[2] / radii[2]);
                let ds = Vec3::new(d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]);
                let a = ds.dot(&ds);
                let b = os.dot(&ds);
                let c = os.dot(&os) - 1.0;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let (s0, s1) = ((-b - sq) / a, (-b + sq) / a);
                if s0 > 1e-9 {
                    s0
                } else if s1 > 1e-9 {
                    s1
                } else {
                    return None;
                }
            }
            Shape::Quad { half_extent } => {
                if d[2].abs() < 1e-15 {
                    return None;
                }
                let s = -o[2] / d[2];
                let p = o + d * s;
                if s <= 1e-9 || p[0].abs() > half_extent[0] || p[1].abs() > half_extent[1] {
                    return None;
                }
                s
            }
        };
        Some((s, o + d * s))
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3<f64> {
        match &self.shape {
            Shape::Ellipsoid { radii } => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vec3::new(radii[0] * r * phi.cos(), radii[1] * r * phi.sin(), radii[2] * z)
            }
            Shape::Quad { half_extent } => Vec3::new(
                rng.gen_range(-half_extent[0]..half_extent[0]),
                rng.gen_range(-half_extent[1]..half_extent[1]),
                0.0,
            ),
        }
    }
}

/// Cameras on a horizontal arc around `target`, all looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub target: [f64; 3],
    pub radius: f64,
    /// Total swept angle in radians; zero keeps the camera fixed.
    pub arc: f64,
    /// Offset along world y (image-down axis).
    pub height: f64,
    pub focal: f64,
}

impl CameraPath {
    pub fn eye(&self, angle: f64) -> Vec3<f64> {
        Vec3(self.target) + Vec3::new(self.radius * angle.sin(), self.height, -self.radius * angle.cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub validation: usize,
    pub camera: CameraPath,
    pub objects: Vec<SynthObject>,
    pub background: [f64; 3],
    /// Points sampled on visible static surfaces for the initial cloud.
    pub points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub object: usize,
    /// Camera-space depth for camera rays, ray parameter otherwise.
    pub distance: f64,
    pub world: Vec3<f64>,
    pub local: Vec3<f64>,
}

/// Presets used by tests and the CLI.
pub const PRESETS: [&str; 4] = ["one-ellipsoid", "moving-quad", "three-frame", "translating-ellipsoid"];

fn tex(base: [f64; 3], amplitude: f64, frequency: f64) -> Texture {
    Texture { base, amplitude, frequency }
}

impl SynthSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let path = |radius, arc, focal| CameraPath { target: [0.0; 3], radius, arc, height: 0.0, focal };
        let ellipsoid = |radii, center, velocity, texture| SynthObject {
            shape: Shape::Ellipsoid { radii },
            center,
            rotation: [0.95, 0.1, 0.25, 0.15],
            velocity,
            texture,
        };
        let quad = |half_extent, center, velocity, texture| SynthObject {
            shape: Shape::Quad { half_extent },
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            velocity,
            texture,
        };
        Ok(match name {
            "one-ellipsoid" => SynthSpec {
                width: 32,
                height: 32,
                frames: 8,
                validation: 2,
                camera: path(3.0, 0.8, 40.0),
                objects: vec![ellipsoid([0.7, 0.5, 0.4], [0.0; 3], [0.0; 3], tex([0.6, 0.45, 0.35], 0.3, 5.0))],
                background: [0.0; 3],
                points: 400,
            },
            "translating-ellipsoid" => SynthSpec {
                width: 32,
                height: 32,
                frames: 4,
                validation: 1,
                camera: path(3.0, 0.3, 40.0),
                objects: vec![ellipsoid([0.5, 0.5, 0.5], [-0.3, 0.0, 0.0], [0.6, 0.1, 0.2], tex([0.5, 0.5, 0.5], 0.3, 4.0))],
                background: [0.0; 3],
                points: 200,
            },
            "moving-quad" => SynthSpec {
                width: 32,
                height: 32,
                frames: 6,
                validation: 2,
                camera: path(3.0, 0.2, 36.0),
                objects: vec![
                    quad([2.5, 2.5], [0.0, 0.0, 1.0], [0.0; 3], tex([0.45, 0.5, 0.55], 0.25, 3.0)),
                    quad([0.35, 0.35], [-0.5, 0.0, 0.0], [1.0, 0.0, 0.0], tex([0.9, 0.3, 0.15], 0.08, 6.0)),
                ],
                background: [0.0; 3],
                points: 600,
            },
            "three-frame" => SynthSpec {
                width: 32,
                height: 32,
                frames: 3,
                validation: 2,
                camera: path(3.2, 0.5, 36.0),
                objects: vec![
                    quad([2.5, 2.5], [0.0, 0.0, 1.2], [0.0; 3], tex([0.4, 0.45, 0.5], 0.15, 3.0)),
                    ellipsoid([0.55, 0.45, 0.35], [-0.35, 0.1, 0.0], [0.0; 3], tex([0.7, 0.5, 0.3], 0.25, 6.0)),
                    ellipsoid([0.3, 0.3, 0.3], [0.5, -0.3, -0.3], [0.0; 3], tex([0.3, 0.6, 0.4], 0.2, 8.0)),
                ],
                background: [0.0; 3],
                points: 800,
            },
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown synthetic preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("synthetic image size must be non-zero".into()));
        }
        if self.frames < 2 {
            return Err(Error::InvalidParameter("synthetic scene needs at least two frames".into()));
        }
        if !(self.camera.focal > 0.0) || !(self.camera.radius > 0.0) {
            return Err(Error::InvalidParameter("camera focal length and radius must be positive".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let ok = match &o.shape {
                Shape::Ellipsoid { radii } => radii.iter().all(|r| *r > 0.0),
                Shape::Quad { half_extent } => half_extent.iter().all(|r| *r > 0.0),
            };
            if !ok || crate::math::quat_norm(&o.rotation) < 1e-8 {
                return Err(Error::InvalidParameter(format!("synthetic object {i} has a degenerate shape")));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.camera.focal;
        Intrinsics { fx: f, fy: f, cx: self.width as f64 / 2.0, cy: self.height as f64 / 2.0 }
    }

    fn camera_at(&self, angle: f64, t: f64) -> Result<Camera<f64>> {
        let p = &self.camera;
        Camera::look_at(
            self.intrinsics(),
            p.eye(angle),
            Vec3(p.target),
            Vec3::new(0.0, -1.0, 0.0),
            self.width,
            self.height,
            t,
        )
    }

    /// Training cameras, evenly spaced along the arc and in time.
    pub fn train_cameras(&self) -> Result<Vec<Camera<f64>>> {
        let n = self.frames;
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                self.camera_at(self.camera.arc * (s - 0.5), s)
            })
            .collect()
    }

    /// Held-out cameras midway between training samples of angle and time.
    pub fn validation_cameras(&self) -> Result<Vec<Camera<f64>>> {
        let n = self.validation;
        (0..n)
            .map(|i| {
                let s = (i as f64 + 0.5) / n as f64;
                self.camera_at(self.camera.arc * (s - 0.5), s)
            })
            .collect()
    }

    /// First intersection along `origin + s * dir` at time `t`.
    pub fn raycast(&self, origin: &Vec3<f64>, dir: &Vec3<f64>, t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (k, o) in self.objects.iter().enumerate() {
            if let Some((s, local)) = o.intersect(origin, dir, t) {
                if best.map_or(true, |b| s < b.distance) {
                    best = Some(Hit { object: k, distance: s, world: *origin + *dir * s, local });
                }
            }
        }
        best
    }

    /// Hit through pixel coordinate `r`; `distance` is camera-space depth.
    pub fn cast_pixel(&self, cam: &Camera<f64>, r: [f64; 2]) -> Option<Hit> {
        let origin = cam.center();
        let dir = cam.backproject(r, 1.0) - origin;
        self.raycast(&origin, &dir, cam.time)
    }

    /// Where the surface point `hit` (seen at time `t`) moves by time
    /// `t_next`.
    pub fn advect(&self, hit: &Hit, t: f64, t_next: f64) -> Vec3<f64> {
        hit.world + Vec3(self.objects[hit.object].velocity) * (t_next - t)
    }

    /// Whether `cam` sees the surface point with object-space coordinates
    /// `local` on object `k`.
    pub fn sees(&self, cam: &Camera<f64>, k: usize, local: &Vec3<f64>) -> bool {
        let o = &self.objects[k];
        let world = o.center_at(cam.time) + o.rotation_matrix().mul_vec(local);
        let Some((p, _)) = cam.project(&world) else { return false };
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < cam.width as f64 && p[1] < cam.height as f64) {
            return false;
        }
        let origin = cam.center();
        let dir = world - origin;
        match self.raycast(&origin, &dir, cam.time) {
            Some(h) => h.object == k && (h.distance - 1.0).abs() < 1e-6,
            None => false,
        }
    }

    fn color_at(&self, cam: &Camera<f64>, x: usize, y: usize) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let c = match self.cast_pixel(cam, [x as f64 + dx, y as f64 + dy]) {
                Some(h) => self.objects[h.object].color(&h.local),
                None => self.background,
            };
            for i in 0..3 {
                acc[i] += 0.25 * c[i];
            }
        }
        acc
    }

    fn render_frame(&self, id: String, cam: &Camera<f64>, next: Option<&Camera<f64>>, train: &[Camera<f64>]) -> Frame {
        let (w, h) = (self.width, self.height);
        let rows: Vec<_> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut color = Vec::with_capacity(3 * w);
                let mut depth = Vec::with_capacity(w);
                let mut flow = Vec::with_capacity(2 * w);
                let mut dynamic = Vec::with_capacity(w);
                let mut covis = Vec::with_capacity(w);
                for x in 0..w {
                    color.extend(self.color_at(cam, x, y).map(|v| quantize8(v) as f64 / 255.0));
                    let r = [x as f64 + 0.5, y as f64 + 0.5];
                    let hit = self.cast_pixel(cam, r);
                    depth.push(hit.map_or(0.0, |h| h.distance as f32));
                    dynamic.push(hit.is_some_and(|h| !self.objects[h.object].is_static()));
                    covis.push(hit.is_some_and(|h| train.iter().any(|c| self.sees(c, h.object, &h.local))));
                    let f = match (hit, next) {
                        (Some(h), Some(n)) => n
                            .project(&self.advect(&h, cam.time, n.time))
                            .map(|(p, _)| [(p[0] - r[0]) as f32, (p[1] - r[1]) as f32]),
                        _ => None,
                    };
                    flow.extend(f.unwrap_or([UNKNOWN_FLOW as f32 * 10.0; 2]));
                }
                (color, depth, flow, dynamic, covis)
            })
            .collect();
        let mut frame = Frame {
            id,
            camera: cam.clone(),
            image: Image { width: w, height: h, data: Vec::with_capacity(3 * w * h) },
            depth: Some(Vec::with_capacity(w * h)),
            flow: next.map(|_| Vec::with_capacity(2 * w * h)),
            dynamic_mask: Some(Vec::with_capacity(w * h)),
            covisibility: Some(Vec::with_capacity(w * h)),
        };
        for (c, d, f, m, v) in rows {
            frame.image.data.extend(c);
            frame.depth.as_mut().unwrap().extend(d);
            if let Some(fl) = frame.flow.as_mut() {
                fl.extend(f);
            }
            frame.dynamic_mask.as_mut().unwrap().extend(m);
            frame.covisibility.as_mut().unwrap().extend(v);
        }
        frame
    }

    fn sample_points(&self, train: &[Camera<f64>], seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let statics: Vec<usize> = (0..self.objects.len()).filter(|&k| self.objects[k].is_static()).collect();
        let mut cloud = PointCloud::default();
        if statics.is_empty() {
            return cloud;
        }
        let mut attempts = 0;
        while cloud.len() < self.points && attempts < 50 * self.points {
            attempts += 1;
            let k = statics[rng.gen_range(0..statics.len())];
            let o = &self.objects[k];
            let local = o.sample_surface(&mut rng);
            if !train.iter().any(|c| self.sees(c, k, &local)) {
                continue;
            }
            let p = o.center_at(0.0) + o.rotation_matrix().mul_vec(&local);
            cloud.positions.push(p.0.map(|v| v as f32));
            cloud.colors.push(o.color(&local).map(quantize8));
        }
        cloud
    }
}

/// Everything needed to regenerate or re-evaluate a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub seed: u64,
}

/// Renders a synthetic scene in memory. Images are quantized to 8 bits,
/// depth and flow are rounded to `f32`, so the bundle round-trips through
/// [`save_scene`] exactly.
pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<SceneBundle> {
    spec.validate()?;
    let train = spec.train_cameras()?;
    let frames = train
        .iter()
        .enumerate()
        .map(|(i, cam)| spec.render_frame(format!("{i:04}"), cam, train.get(i + 1), &train))
        .collect();
    let validation = spec
        .validation_cameras()?
        .iter()
        .enumerate()
        .map(|(i, cam)| spec.render_frame(format!("val{i:04}"), cam, None, &train))
        .collect();
    let points = Some(spec.sample_points(&train, seed));
    Ok(SceneBundle { frames, validation, points })
}

/// Renders the scene and writes it with its ground truth.
pub fn write_synth_scene(dir: &Path, spec: &SynthSpec, seed: u64) -> Result<SceneBundle> {
    let bundle = synth_scene(spec, seed)?;
    save_scene(dir, &bundle)?;
    let truth = GroundTruth { spec: spec.clone(), seed };
    let path = dir.join(GROUND_TRUTH_NAME);
    let text = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(bundle)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(GROUND_TRUTH_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))
}
