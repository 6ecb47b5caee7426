//! Seeded random scenes for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformation::{Aabb, DeformationField, FieldConfig};
use crate::math::{quat_normalize, Mat3, Vec3};
use crate::scene::{Camera, Gaussian, Intrinsics};

/// Camera at `(0, 0, -4)` looking down +z at the origin.
pub fn front_camera(width: usize, height: usize, time: f64) -> Camera<f64> {
    let f = width.max(height) as f64;
    let intr = Intrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 };
    Camera::new(intr, Mat3::identity(), Vec3::new(0.0, 0.0, 4.0), width, height, time).unwrap()
}

/// `n` random anisotropic primitives in `[-1, 1]^3`, seen by
/// [`front_camera`].
pub fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian<f64>> {
    (0..n)
        .map(|_| {
            let mean = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut g = Gaussian::from_point(mean, [0.5; 3], 0.1, 0.5);
            g.rotation = quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            for k in 0..3 {
                g.log_scale[k] = rng.gen_range(0.03f64..0.3).ln();
            }
            g.opacity_logit = rng.gen_range(-2.5..3.0);
            for c in 0..3 {
                g.sh[0][c] = rng.gen_range(-1.2..1.2);
                for k in 1..4 {
                    g.sh[k][c] = rng.gen_range(-0.3..0.3);
                }
            }
            g.uncertainty = rng.gen_range(0.0..1.0);
            g
        })
        .collect()
}

/// A small field with a non-trivial random decoder.
pub fn random_field(rng: &mut ChaCha8Rng, config: FieldConfig, amplitude: f64) -> DeformationField<f64> {
    let mut field = DeformationField::new(config, rng.gen()).unwrap();
    let l = field.layout.clone();
    for v in &mut field.params[l.w2..l.b2 + 10] {
        *v = rng.gen_range(-amplitude..amplitude);
    }
    for v in &mut field.params[l.b1..l.w2] {
        *v = rng.gen_range(-0.1..0.1);
    }
    field
}

pub fn small_field_config() -> FieldConfig {
    FieldConfig {
        feature_dim: 4,
        hidden_dim: 8,
        space_resolution: 4,
        time_resolution: 4,
        bounds: Aabb { min: [-1.5; 3], max: [1.5; 3] },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two clusters of opaque primitives; the training views see only the
/// left one, the unseen view sees both.
pub struct TwoClusterScene {
    pub prims: Vec<Gaussian<f64>>,
    pub train: Vec<Camera<f64>>,
    pub unseen: Camera<f64>,
    pub observed: Vec<usize>,
    pub unobserved: Vec<usize>,
}

pub fn two_cluster_scene() -> TwoClusterScene {
    let mut prims = Vec::new();
    let mut observed = Vec::new();
    let mut unobserved = Vec::new();
    for (cx, list) in [(-1.5, &mut observed), (1.5, &mut unobserved)] {
        for i in 0..5 {
            for j in 0..5 {
                let mean = Vec3::new(cx + 0.25 * (i as f64 - 2.0), 0.25 * (j as f64 - 2.0), 0.0);
                list.push(prims.len());
                prims.push(Gaussian::from_point(mean, [0.6, 0.5, 0.4], 0.12, 0.9));
            }
        }
    }
    let intr = Intrinsics { fx: 48.0, fy: 48.0, cx: 24.0, cy: 24.0 };
    let at = |x: f64, y: f64, z: f64, t: f64| {
        Camera::new(intr, Mat3::identity(), Vec3::new(-x, -y, -z), 48, 48, t).unwrap()
    };
    let train = vec![at(-1.6, 0.0, -3.0, 0.0), at(-1.5, 0.1, -3.0, 0.5), at(-1.4, -0.1, -3.0, 1.0)];
    let unseen = at(0.0, 0.0, -5.0, 0.25);
    TwoClusterScene { prims, train, unseen, observed, unobserved }
}
