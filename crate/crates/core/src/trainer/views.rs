//! Sampling poses between training cameras.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{mat_to_quat, quat_to_mat, slerp};
use crate::scene::Camera;

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let s: f64 = rng.gen();
        if s > 0.0 {
            return s;
        }
    }
}

/// Camera between two time-adjacent training cameras: the center moves
/// linearly and the orientation by slerp with a factor drawn from `(0, 1)`;
/// the time is drawn separately from the open interval between theirs.
/// Intrinsics and size come from the earlier camera.
pub fn sample_unseen_view(cams: &[Camera<f64>], rng: &mut impl Rng) -> Result<Camera<f64>> {
    if cams.len() < 2 {
        return Err(Error::InvalidParameter("unseen views need at least two training cameras".into()));
    }
    let j = rng.gen_range(0..cams.len() - 1);
    let s = open_unit(rng);
    let u = open_unit(rng);
    interpolate_camera(&cams[j], &cams[j + 1], s, cams[j].time + u * (cams[j + 1].time - cams[j].time))
}

pub fn interpolate_camera(a: &Camera<f64>, b: &Camera<f64>, s: f64, time: f64) -> Result<Camera<f64>> {
    let center = a.center() * (1.0 - s) + b.center() * s;
    let q = slerp(&mat_to_quat(&a.rotation), &mat_to_quat(&b.rotation), s);
    let r = quat_to_mat(&q);
    let t = -r.mul_vec(&center);
    Camera::new(a.intrinsics(), r, t, a.width, a.height, time)
}
