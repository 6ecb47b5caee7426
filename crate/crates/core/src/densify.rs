//! Seeding primitives in moving regions, and clone/split/prune control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::formats::{quantize8, PointCloud};
use crate::dataio::scene::SceneBundle;
use crate::error::{Error, Result};
use crate::math::{logit, quat_to_mat, Real, Vec3};
use crate::scene::{Camera, Gaussian, SH_C0};

/// Flow values at or above this magnitude mark unknown flow.
pub const UNKNOWN_FLOW: f64 = 1e9;

/// Pixels whose flow magnitude is at least `tau`. Unknown or non-finite
/// flow is never dynamic.
pub fn dynamic_mask(flow: &[f64], tau: f64) -> Vec<bool> {
    flow.chunks_exact(2)
        .map(|f| {
            let valid = f.iter().all(|v| v.is_finite() && v.abs() < UNKNOWN_FLOW);
            valid && (f[0] * f[0] + f[1] * f[1]).sqrt() >= tau
        })
        .collect()
}

/// World point at camera-space depth `depth` through pixel coordinate `r`.
pub fn backproject(r: [f64; 2], depth: f64, cam: &Camera<f64>) -> Result<Vec3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidParameter(format!("backprojection depth must be positive, got {depth}")));
    }
    Ok(cam.backproject(r, depth))
}

/// Image displacement a static scene with depth map `depth` (seen by `cam`)
/// would show when viewed by `next`. Pixels without valid depth or that
/// fall behind `next` get zero.
pub fn rigid_flow(depth: &[f64], cam: &Camera<f64>, next: &Camera<f64>) -> Vec<f64> {
    let w = cam.width;
    let mut out = vec![0.0; 2 * depth.len()];
    for (i, &d) in depth.iter().enumerate() {
        if !(d > 0.0) || !d.is_finite() {
            continue;
        }
        let r = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
        if let Some((p, _)) = next.project(&cam.backproject(r, d)) {
            out[2 * i] = p[0] - r[0];
            out[2 * i + 1] = p[1] - r[1];
        }
    }
    out
}

/// Optical flow minus the camera-induced part; unknown entries stay unknown.
pub fn compensate_camera_motion(flow: &[f64], depth: &[f64], cam: &Camera<f64>, next: &Camera<f64>) -> Vec<f64> {
    let rigid = rigid_flow(depth, cam, next);
    flow.iter()
        .zip(&rigid)
        .map(|(f, r)| if f.abs() >= UNKNOWN_FLOW || !f.is_finite() { *f } else { f - r })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Maximum number of new primitives.
    pub samples: usize,
    /// Flow magnitude in pixels above which a pixel is dynamic.
    pub threshold: f64,
    pub opacity: f64,
    /// Scale used when fewer than two points are sampled.
    pub fallback_scale: f64,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self { samples: 2000, threshold: 1.0, opacity: 0.1, fallback_scale: 0.01, seed: 0 }
    }
}

/// One frame's inputs to [`densify_dynamic`]. `image` is RGB in `[0, 1]`,
/// `flow` is raw optical flow towards `next`.
pub struct DensifyFrame<'a> {
    pub camera: &'a Camera<f64>,
    pub image: &'a [f64],
    pub depth: &'a [f64],
    pub flow: &'a [f64],
    pub next: Option<&'a Camera<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct DensifyResult {
    pub prims: Vec<Gaussian<f64>>,
    /// `(frame, x, y)` of each sampled pixel.
    pub pixels: Vec<(usize, usize, usize)>,
    /// Set when no frame had a dynamic pixel.
    pub empty_mask: bool,
}

/// Mean distance from each point to its (up to) three nearest neighbors.
pub fn knn_scale(points: &[Vec3<f64>], fallback: f64) -> Vec<f64> {
    if points.len() < 2 {
        return vec![fallback; points.len()];
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (*p - *q).norm();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(|a, b| a.partial_cmp(b).unwrap());
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            let mean = found.iter().sum::<f64>() / found.len() as f64;
            if mean > 0.0 {
                mean
            } else {
                fallback
            }
        })
        .collect()
}

/// New primitives at back-projected dynamic pixels: camera motion is
/// removed from each frame's flow, the result is thresholded, and at most
/// `samples` pixels are drawn by seeded stratified sampling over all
/// frames in order.
pub fn densify_dynamic(frames: &[DensifyFrame], cfg: &DensifyConfig) -> Result<DensifyResult> {
    let mut candidates = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let cam = f.camera;
        let n = cam.width * cam.height;
        if f.depth.len() != n || f.flow.len() != 2 * n || f.image.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!("densify frame {fi} channels do not match its camera")));
        }
        let flow = match f.next {
            Some(next) => compensate_camera_motion(f.flow, f.depth, cam, next),
            None => f.flow.to_vec(),
        };
        let mask = dynamic_mask(&flow, cfg.threshold);
        for (i, m) in mask.iter().enumerate() {
            let d = f.depth[i];
            if *m && d > 0.0 && d.is_finite() {
                candidates.push((fi, i % cam.width, i / cam.width));
            }
        }
    }
    if candidates.is_empty() {
        log::warn!("dynamic mask is empty in every frame; no primitives added");
        return Ok(DensifyResult { empty_mask: true, ..DensifyResult::default() });
    }

    let pixels: Vec<(usize, usize, usize)> = if candidates.len() <= cfg.samples {
        candidates
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = candidates.len();
        (0..cfg.samples)
            .map(|k| {
                let lo = k * n / cfg.samples;
                let hi = ((k + 1) * n / cfg.samples).max(lo + 1);
                candidates[rng.gen_range(lo..hi)]
            })
            .collect()
    };

    let mut means = Vec::with_capacity(pixels.len());
    let mut colors = Vec::with_capacity(pixels.len());
    for &(fi, x, y) in &pixels {
        let f = &frames[fi];
        let i = y * f.camera.width + x;
        means.push(backproject([x as f64 + 0.5, y as f64 + 0.5], f.depth[i], f.camera)?);
        colors.push([f.image[3 * i], f.image[3 * i + 1], f.image[3 * i + 2]]);
    }
    let scales = knn_scale(&means, cfg.fallback_scale);
    let prims = means
        .iter()
        .zip(&colors)
        .zip(&scales)
        .map(|((m, c), s)| Gaussian::from_point(*m, *c, *s, cfg.opacity))
        .collect();
    Ok(DensifyResult { prims, pixels, empty_mask: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityControlConfig {
    /// Average positional-gradient norm above which a primitive is densified.
    pub grad_threshold: f64,
    /// Largest scale above which high-gradient primitives split instead of
    /// cloning.
    pub split_scale: f64,
    pub min_opacity: f64,
    pub max_primitives: usize,
}

impl Default for DensityControlConfig {
    fn default() -> Self {
        Self { grad_threshold: 2e-4, split_scale: 0.05, min_opacity: 0.005, max_primitives: 200_000 }
    }
}

/// Running average of positional-gradient norms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn add(&mut self, i: usize, norm: f64) {
        self.sum[i] += norm;
        self.count[i] += 1;
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensityControlResult<T> {
    pub prims: Vec<Gaussian<T>>,
    /// For each output primitive, the input it inherits optimizer state
    /// from; `None` for new children.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub cap_reached: bool,
}

/// Clones small and splits large high-gradient primitives, then prunes
/// nearly transparent ones. Splitting replaces a primitive by two children
/// at one standard deviation along its longest axis, each with the scale
/// divided by 1.6. Growth stops at `max_primitives`.
pub fn adaptive_density_control<T: Real>(
    prims: &[Gaussian<T>],
    stats: &GradStats,
    cfg: &DensityControlConfig,
) -> Result<DensityControlResult<T>> {
    if stats.sum.len() != prims.len() || stats.count.len() != prims.len() {
        return Err(Error::ShapeMismatch("gradient statistics do not match the primitive count".into()));
    }
    let mut out = Vec::with_capacity(prims.len());
    let mut origin = Vec::with_capacity(prims.len());
    let mut extra = Vec::new();
    let (mut cloned, mut split, mut cap_reached) = (0, 0, false);
    let mut count = prims.len();
    let shrink = T::of(1.6f64.ln());
    for (i, p) in prims.iter().enumerate() {
        let hot = stats.average(i) > cfg.grad_threshold;
        if !hot {
            out.push(p.clone());
            origin.push(Some(i));
            continue;
        }
        if count + 1 > cfg.max_primitives {
            cap_reached = true;
            out.push(p.clone());
            origin.push(Some(i));
            continue;
        }
        let s = p.scale();
        let (axis, max_scale) = (0..3).map(|k| (k, s[k])).fold((0, T::zero()), |a, b| if b.1 > a.1 { b } else { a });
        if max_scale.as_f64() > cfg.split_scale {
            let r = quat_to_mat(&crate::math::quat_normalize(&p.rotation));
            let dir = Vec3::new(r.0[0][axis], r.0[1][axis], r.0[2][axis]) * max_scale;
            for sign in [T::one(), -T::one()] {
                let mut c = p.clone();
                c.mean = p.mean + dir * sign;
                c.log_scale = Vec3(p.log_scale.0.map(|v| v - shrink));
                extra.push(c);
            }
            split += 1;
        } else {
            out.push(p.clone());
            origin.push(Some(i));
            extra.push(p.clone());
            cloned += 1;
        }
        count += 1;
    }
    let kept = out.len();
    origin.extend(std::iter::repeat(None).take(extra.len()));
    out.extend(extra);
    let floor = T::of(logit(cfg.min_opacity));
    let mut pruned = 0;
    let (mut prims_out, mut origin_out) = (Vec::with_capacity(out.len()), Vec::with_capacity(out.len()));
    for (k, (p, o)) in out.into_iter().zip(origin).enumerate() {
        if p.opacity_logit < floor {
            if k < kept {
                pruned += 1;
            }
            continue;
        }
        prims_out.push(p);
        origin_out.push(o);
    }
    Ok(DensityControlResult { prims: prims_out, origin: origin_out, cloned, split, pruned, cap_reached })
}

/// [`densify_dynamic`] over every frame of a scene that has depth and flow
/// and a successor to flow towards.
pub fn densify_scene(scene: &SceneBundle, cfg: &DensifyConfig) -> Result<DensifyResult> {
    let data: Vec<(usize, Vec<f64>, Vec<f64>)> = scene
        .frames
        .iter()
        .enumerate()
        .filter(|(i, _)| i + 1 < scene.frames.len())
        .filter_map(|(i, f)| Some((i, f.depth_f64()?, f.flow_f64()?)))
        .collect();
    let frames: Vec<DensifyFrame> = data
        .iter()
        .map(|(i, depth, flow)| DensifyFrame {
            camera: &scene.frames[*i].camera,
            image: &scene.frames[*i].image.data,
            depth,
            flow,
            next: Some(&scene.frames[i + 1].camera),
        })
        .collect();
    densify_dynamic(&frames, cfg)
}

/// Centers and base colors of primitives as a point cloud.
pub fn to_point_cloud<T: Real>(prims: &[Gaussian<T>]) -> PointCloud {
    PointCloud {
        positions: prims.iter().map(|p| p.mean.0.map(|v| v.as_f64() as f32)).collect(),
        colors: prims
            .iter()
            .map(|p| p.sh[0].map(|c| quantize8(c.as_f64() * SH_C0 + 0.5)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quat_from_axis_angle, quat_to_mat, Mat3};
    use crate::scene::{eval_sh, Intrinsics};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn cam(w: usize, h: usize) -> Camera<f64> {
        let intr = Intrinsics { fx: 20.0, fy: 22.0, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
        Camera::new(intr, Mat3::identity(), Vec3::zero(), w, h, 0.0).unwrap()
    }

    #[test]
    fn mask_examples() {
        assert!(dynamic_mask(&[0.0; 20], 1.0).iter().all(|m| !m));
        let five: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 3.0 } else { 4.0 }).collect();
        assert!(dynamic_mask(&five, 1.0).iter().all(|m| *m));
        assert!(!dynamic_mask(&[1e10, 1e10], 1.0)[0]);
    }

    #[test]
    fn backproject_examples() {
        let c = cam(32, 32);
        let p = backproject([16.0, 16.0], 2.0, &c).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        let p = backproject([36.0, 16.0], 1.0, &c).unwrap();
        assert!((p - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(backproject([1.0, 1.0], 0.0, &c).is_err());
    }

    #[test]
    fn backproject_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let q = quat_from_axis_angle(axis, rng.gen_range(-3.0..3.0));
            let t = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let intr = Intrinsics { fx: rng.gen_range(20.0..200.0), fy: rng.gen_range(20.0..200.0), cx: 30.0, cy: 20.0 };
            let c = Camera::new(intr, quat_to_mat(&q), t, 60, 40, 0.0).unwrap();
            let r = [rng.gen_range(0.0..60.0), rng.gen_range(0.0..40.0)];
            let d = rng.gen_range(0.1..50.0);
            let (p, z) = c.project(&backproject(r, d, &c).unwrap()).unwrap();
            worst = worst.max((p[0] - r[0]).abs()).max((p[1] - r[1]).abs()).max((z - d).abs());
        }
        assert!(worst < 1e-9, "{worst:e}");
    }

    struct Frame {
        cam: Camera<f64>,
        next: Camera<f64>,
        image: Vec<f64>,
        depth: Vec<f64>,
        flow: Vec<f64>,
    }

    /// Fronto-parallel wall at depth 3; pixels with x < `moving_cols` move
    /// by 4 px to the right.
    fn wall(moving_cols: usize, camera_shift: f64) -> Frame {
        let c = cam(24, 16);
        let mut next = c.clone();
        next.translation[0] += camera_shift;
        let n = 24 * 16;
        let depth = vec![3.0; n];
        let mut flow = rigid_flow(&depth, &c, &next);
        let mut image = vec![0.0; 3 * n];
        for i in 0..n {
            let x = i % 24;
            image[3 * i] = x as f64 / 24.0;
            image[3 * i + 1] = 0.3;
            image[3 * i + 2] = (i / 24) as f64 / 16.0;
            if x < moving_cols {
                flow[2 * i] += 4.0;
            }
        }
        Frame { cam: c, next, image, depth, flow }
    }

    fn frame_ref(f: &Frame) -> DensifyFrame<'_> {
        DensifyFrame { camera: &f.cam, image: &f.image, depth: &f.depth, flow: &f.flow, next: Some(&f.next) }
    }

    #[test]
    fn static_scene_adds_nothing() {
        let f = wall(0, 0.3);
        let r = densify_dynamic(&[frame_ref(&f)], &DensifyConfig::default()).unwrap();
        assert!(r.prims.is_empty());
        assert!(r.empty_mask);
    }

    #[test]
    fn samples_lie_on_dynamic_pixels_and_surface() {
        let f = wall(10, 0.2);
        let cfg = DensifyConfig::default();
        let r = densify_dynamic(&[frame_ref(&f)], &cfg).unwrap();
        assert_eq!(r.prims.len(), 10 * 16);
        for (p, &(_, x, y)) in r.prims.iter().zip(&r.pixels) {
            assert!(x < 10);
            assert!((p.mean.z() - 3.0).abs() < 1e-12);
            assert!((p.opacity() - 0.1).abs() < 1e-12);
            let i = y * 24 + x;
            for dir in [Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.6, -0.8, 0.0)] {
                let rgb = eval_sh(1, &p.sh, &dir);
                for c in 0..3 {
                    assert!((rgb[c] - f.image[3 * i + c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sample_budget_is_exact_and_seeded() {
        let f = wall(20, 0.0);
        let cfg = DensifyConfig { samples: 10, seed: 5, ..DensifyConfig::default() };
        let a = densify_dynamic(&[frame_ref(&f)], &cfg).unwrap();
        let b = densify_dynamic(&[frame_ref(&f)], &cfg).unwrap();
        assert_eq!(a.prims.len(), 10);
        assert_eq!(a.pixels, b.pixels);
        let c = densify_dynamic(&[frame_ref(&f)], &DensifyConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn knn_scale_of_a_grid() {
        let pts: Vec<Vec3<f64>> = (0..5).flat_map(|i| (0..5).map(move |j| Vec3::new(i as f64, j as f64, 0.0))).collect();
        let s = knn_scale(&pts, 0.01);
        // interior points have four neighbors at distance 1
        assert!((s[12] - 1.0).abs() < 1e-12);
        assert_eq!(knn_scale(&pts[..1], 0.01), vec![0.01]);
    }

    fn prim(scale: f64, opacity: f64) -> Gaussian<f64> {
        Gaussian::from_point(Vec3::new(0.1, 0.2, 0.3), [0.5; 3], scale, opacity)
    }

    #[test]
    fn density_control_examples() {
        let cfg = DensityControlConfig::default();
        let prims = vec![prim(0.01, 0.5), prim(0.2, 0.5)];
        let mut stats = GradStats::new(2);
        stats.add(0, 1e-5);
        let r = adaptive_density_control(&prims, &stats, &cfg).unwrap();
        assert_eq!(r.prims, prims);

        stats.add(1, 1.0);
        let r = adaptive_density_control(&prims, &stats, &cfg).unwrap();
        assert_eq!(r.prims.len(), 3);
        assert_eq!(r.split, 1);
        assert_eq!(r.origin, vec![Some(0), None, None]);
        for c in &r.prims[1..] {
            assert!((c.scale()[0] - 0.2 / 1.6).abs() < 1e-12);
        }
        let mid = (r.prims[1].mean + r.prims[2].mean) * 0.5;
        assert!((mid - prims[1].mean).norm() < 1e-12);

        let mut stats = GradStats::new(2);
        stats.add(0, 1.0);
        let r = adaptive_density_control(&prims, &stats, &cfg).unwrap();
        assert_eq!(r.cloned, 1);
        assert_eq!(r.prims.len(), 3);

        let faint = vec![prim(0.01, 0.001), prim(0.01, 0.5)];
        let r = adaptive_density_control(&faint, &GradStats::new(2), &cfg).unwrap();
        assert_eq!(r.prims.len(), 1);
        assert_eq!(r.pruned, 1);
        assert_eq!(r.origin, vec![Some(1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn density_control_respects_cap(n in 1usize..40, cap in 1usize..60, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prims: Vec<Gaussian<f64>> = (0..n).map(|_| prim(rng.gen_range(0.001..0.3), rng.gen_range(0.001..1.0))).collect();
            let mut stats = GradStats::new(n);
            for i in 0..n {
                stats.add(i, rng.gen_range(0.0..1e-3));
            }
            let cfg = DensityControlConfig { max_primitives: cap.max(n), ..DensityControlConfig::default() };
            let r = adaptive_density_control(&prims, &stats, &cfg).unwrap();
            prop_assert!(r.prims.len() <= cfg.max_primitives);
            prop_assert_eq!(r.prims.len(), r.origin.len());
            prop_assert!(r.prims.iter().all(|p| p.opacity() >= cfg.min_opacity));
        }
    }
}
