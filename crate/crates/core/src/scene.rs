//! Gaussian primitives, pinhole cameras, and the projection math shared by
//! every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    logit, quat_identity, quat_normalize, quat_to_mat, quat_to_mat_backward, sigmoid, Mat3, Quat,
    Real, Sym2, Vec3,
};

/// Real SH band-0 constant, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Real SH band-1 constant, `sqrt(3) / (2 sqrt(pi))`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Storage slots for SH coefficients per color channel (degree 1).
pub const SH_COEFFS: usize = 4;
pub const MAX_SH_DEGREE: usize = 1;
/// Camera-space depth below which a primitive is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in pixels squared.
pub const COV2D_DILATION: f64 = 0.3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Band-0 coefficient that makes [`eval_sh`] return `rgb` in every direction.
pub fn rgb_to_sh0(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Canonical (time-independent) state of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T> {
    pub mean: Vec3<T>,
    /// `(w, x, y, z)`, kept at unit length by the optimizer.
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
    pub opacity_logit: T,
    /// `sh[k][channel]` for basis function `k`.
    pub sh: [[T; 3]; SH_COEFFS],
    /// Accumulated blend weight over the training views.
    pub contribution: T,
    pub uncertainty: T,
}

impl<T: Real> Gaussian<T> {
    /// Number of learnable scalars per primitive.
    pub const NUM_PARAMS: usize = 3 + 4 + 3 + 1 + 3 * SH_COEFFS;

    /// Isotropic primitive whose color is `rgb` from every direction.
    pub fn from_point(mean: Vec3<T>, rgb: [T; 3], scale: T, opacity: T) -> Self {
        let mut sh = [[T::zero(); 3]; SH_COEFFS];
        for c in 0..3 {
            sh[0][c] = T::of(rgb_to_sh0(rgb[c].as_f64()));
        }
        Self {
            mean,
            rotation: quat_identity(),
            log_scale: Vec3([scale.ln(); 3]),
            opacity_logit: logit(opacity),
            sh,
            contribution: T::zero(),
            uncertainty: T::one(),
        }
    }

    pub fn opacity(&self) -> T {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3<T> {
        Vec3(self.log_scale.0.map(|s| s.exp()))
    }

    /// Learnable parameters in the order mean, rotation, log-scale,
    /// opacity logit, SH coefficients.
    pub fn params(&self) -> [T; 23] {
        let mut p = [T::zero(); 23];
        p[0..3].copy_from_slice(&self.mean.0);
        p[3..7].copy_from_slice(&self.rotation);
        p[7..10].copy_from_slice(&self.log_scale.0);
        p[10] = self.opacity_logit;
        for k in 0..SH_COEFFS {
            p[11 + 3 * k..14 + 3 * k].copy_from_slice(&self.sh[k]);
        }
        p
    }

    pub fn set_params(&mut self, p: &[T; 23]) {
        self.mean.0.copy_from_slice(&p[0..3]);
        self.rotation.copy_from_slice(&p[3..7]);
        self.log_scale.0.copy_from_slice(&p[7..10]);
        self.opacity_logit = p[10];
        for k in 0..SH_COEFFS {
            self.sh[k].copy_from_slice(&p[11 + 3 * k..14 + 3 * k]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Gaussian<U> {
        let c = |v: T| U::of(v.as_f64());
        Gaussian {
            mean: self.mean.cast(),
            rotation: self.rotation.map(c),
            log_scale: self.log_scale.cast(),
            opacity_logit: c(self.opacity_logit),
            sh: self.sh.map(|r| r.map(c)),
            contribution: c(self.contribution),
            uncertainty: c(self.uncertainty),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera with a rigid world-to-camera pose and a timestamp.
///
/// Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`; its center is at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// Rotation block of the world-to-camera transform.
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub time: T,
}

impl<T: Real> Camera<T> {
    pub fn new(
        intr: Intrinsics,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: usize,
        height: usize,
        time: T,
    ) -> Result<Self> {
        if !(intr.fx > 0.0 && intr.fy > 0.0) || !intr.cx.is_finite() || !intr.cy.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                intr.fx, intr.fy
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image size must be non-zero".into()));
        }
        check_rotation(&rotation.cast::<f64>())?;
        if !translation.is_finite() || !time.is_finite() {
            return Err(Error::InvalidParameter("non-finite camera translation or time".into()));
        }
        Ok(Self {
            fx: T::of(intr.fx),
            fy: T::of(intr.fy),
            cx: T::of(intr.cx),
            cy: T::of(intr.cy),
            width,
            height,
            rotation,
            translation,
            time,
        })
    }

    /// From a row-major 4x4 world-to-camera matrix.
    pub fn from_matrix(
        intr: Intrinsics,
        w2c: &[[f64; 4]; 4],
        width: usize,
        height: usize,
        time: f64,
    ) -> Result<Self> {
        if w2c[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParameter(format!(
                "last row of world_to_camera must be [0,0,0,1], got {:?}",
                w2c[3]
            )));
        }
        let rot = Mat3::from_rows(
            [w2c[0][0], w2c[0][1], w2c[0][2]],
            [w2c[1][0], w2c[1][1], w2c[1][2]],
            [w2c[2][0], w2c[2][1], w2c[2][2]],
        );
        let t = Vec3::new(w2c[0][3], w2c[1][3], w2c[2][3]);
        Self::new(intr, rot.cast(), t.cast(), width, height, T::of(time))
    }

    /// Camera looking from `eye` toward `target`, with `+y` pointing down in
    /// the image (OpenCV convention).
    pub fn look_at(
        intr: Intrinsics,
        eye: Vec3<f64>,
        target: Vec3<f64>,
        up: Vec3<f64>,
        width: usize,
        height: usize,
        time: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalized();
        let right = forward.cross(&up).normalized();
        let down = forward.cross(&right);
        let rot = Mat3::from_rows(right.0, down.0, forward.0);
        let t = -rot.mul_vec(&eye);
        Self::new(intr, rot.cast(), t.cast(), width, height, T::of(time))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx.as_f64(),
            fy: self.fy.as_f64(),
            cx: self.cx.as_f64(),
            cy: self.cy.as_f64(),
        }
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.cast::<f64>().0;
        let t = self.translation.cast::<f64>().0;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        -self.rotation.transpose().mul_vec(&self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Pixel coordinates and camera-space depth of a world point, or `None`
    /// when it lies in front of the near plane.
    pub fn project(&self, p: &Vec3<T>) -> Option<([T; 2], T)> {
        let c = self.to_camera(p);
        if !(c.z() > T::of(NEAR_PLANE)) {
            return None;
        }
        Some(([self.fx * c.x() / c.z() + self.cx, self.fy * c.y() / c.z() + self.cy], c.z()))
    }

    /// World point at camera-space depth `depth` along the ray through pixel
    /// coordinate `r`.
    pub fn backproject(&self, r: [T; 2], depth: T) -> Vec3<T> {
        let c = Vec3::new(
            (r[0] - self.cx) / self.fx * depth,
            (r[1] - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation.transpose().mul_vec(&(c - self.translation))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn with_time(&self, time: T) -> Self {
        Self { time, ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |v: T| U::of(v.as_f64());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
            time: c(self.time),
        }
    }
}

fn check_rotation(r: &Mat3<f64>) -> Result<()> {
    let rrt = r.matmul(&r.transpose());
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let e = if i == j { 1.0 } else { 0.0 };
            err = err.max((rrt.0[i][j] - e).abs());
        }
    }
    if !(err < 1e-5) || !((r.det() - 1.0).abs() < 1e-5) {
        return Err(Error::InvalidParameter(format!(
            "camera rotation is not orthonormal with det +1 (orthonormality error {err:e}, det {})",
            r.det()
        )));
    }
    Ok(())
}

/// `R S S^T R^T` with `R = rotation(q)` and `S = diag(exp(s))`.
pub fn build_covariance<T: Real>(q: &Quat<T>, log_scale: &Vec3<T>) -> Result<Mat3<T>> {
    if !q.iter().all(|v| v.is_finite()) || !log_scale.is_finite() {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    let r = quat_to_mat(&quat_normalize(q));
    Ok(covariance_from_rotation(&r, log_scale))
}

pub(crate) fn covariance_from_rotation<T: Real>(r: &Mat3<T>, log_scale: &Vec3<T>) -> Mat3<T> {
    let s2 = log_scale.0.map(|s| (s + s).exp());
    let mut cov = Mat3::zero();
    for i in 0..3 {
        for j in i..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += r.0[i][k] * s2[k] * r.0[j][k];
            }
            cov.0[i][j] = acc;
            cov.0[j][i] = acc;
        }
    }
    cov
}

/// Gradients of [`build_covariance`] w.r.t. the unit quaternion and the
/// log-scale, given the (symmetric) gradient w.r.t. the covariance entries.
pub fn build_covariance_backward<T: Real>(
    q_unit: &Quat<T>,
    log_scale: &Vec3<T>,
    grad_cov: &Mat3<T>,
) -> (Quat<T>, Vec3<T>) {
    let r = quat_to_mat(q_unit);
    let s = log_scale.0.map(|v| v.exp());
    // cov = M M^T with M = R S; dL/dM = (G + G^T) M
    let gs = grad_cov.add(&grad_cov.transpose());
    let mut m = r;
    for i in 0..3 {
        for j in 0..3 {
            m.0[i][j] = r.0[i][j] * s[j];
        }
    }
    let gm = gs.matmul(&m);
    let mut grad_r = Mat3::zero();
    let mut grad_log_scale = Vec3::zero();
    for j in 0..3 {
        let mut acc = T::zero();
        for i in 0..3 {
            acc += gm.0[i][j] * r.0[i][j];
            grad_r.0[i][j] = gm.0[i][j] * s[j];
        }
        grad_log_scale.0[j] = acc * s[j];
    }
    (quat_to_mat_backward(q_unit, &grad_r), grad_log_scale)
}

/// Image-space footprint of a projected primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance2D<T> {
    pub mean: [T; 2],
    pub cov: Sym2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub splat: Covariance2D<T>,
    /// Camera-space z of the center.
    pub depth: T,
    pub cam_point: Vec3<T>,
}

/// `J W_r` for camera-space point `p`: the 2x3 Jacobian of the pixel
/// projection w.r.t. world coordinates.
fn projection_jacobian<T: Real>(cam: &Camera<T>, p: &Vec3<T>) -> [[T; 3]; 2] {
    let iz = T::one() / p.z();
    let iz2 = iz * iz;
    let j = [
        [cam.fx * iz, T::zero(), -cam.fx * p.x() * iz2],
        [T::zero(), cam.fy * iz, -cam.fy * p.y() * iz2],
    ];
    let w = &cam.rotation.0;
    let mut t = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    t
}

/// Perspective projection of a 3D Gaussian with the local affine
/// approximation; `None` when the center is in front of the near plane.
pub fn project_gaussian<T: Real>(
    mean: &Vec3<T>,
    cov: &Mat3<T>,
    cam: &Camera<T>,
) -> Option<Projection<T>> {
    let p = cam.to_camera(mean);
    if !(p.z() > T::of(NEAR_PLANE)) {
        return None;
    }
    let t = projection_jacobian(cam, &p);
    // T cov T^T
    let mut tc = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            tc[r][c] = t[r][0] * cov.0[0][c] + t[r][1] * cov.0[1][c] + t[r][2] * cov.0[2][c];
        }
    }
    let dot = |a: &[T; 3], b: &[T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let dil = T::of(COV2D_DILATION);
    let cov2 = Sym2::new(dot(&tc[0], &t[0]) + dil, dot(&tc[0], &t[1]), dot(&tc[1], &t[1]) + dil);
    let mean2 = [cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy];
    Some(Projection { splat: Covariance2D { mean: mean2, cov: cov2 }, depth: p.z(), cam_point: p })
}

/// Backward of [`project_gaussian`].
///
/// `grad_cov2` holds the gradient w.r.t. `(a, b, c)` of `[[a, b], [b, c]]`
/// where `b` is a single shared variable. Returns gradients w.r.t. the world
/// mean and the full 3x3 covariance.
pub fn project_gaussian_backward<T: Real>(
    mean: &Vec3<T>,
    cov: &Mat3<T>,
    cam: &Camera<T>,
    grad_mean2: [T; 2],
    grad_cov2: Sym2<T>,
    grad_depth: T,
) -> (Vec3<T>, Mat3<T>) {
    let p = cam.to_camera(mean);
    let t = projection_jacobian(cam, &p);
    let half = T::of(0.5);
    let g = [[grad_cov2.a, half * grad_cov2.b], [half * grad_cov2.b, grad_cov2.c]];

    // dL/dcov = T^T G T
    let mut grad_cov = Mat3::zero();
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for r in 0..2 {
                for c in 0..2 {
                    acc += t[r][i] * g[r][c] * t[c][j];
                }
            }
            grad_cov.0[i][j] = acc;
        }
    }

    // dL/dT = 2 G T cov (cov symmetric)
    let mut tc = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            tc[r][c] = t[r][0] * cov.0[0][c] + t[r][1] * cov.0[1][c] + t[r][2] * cov.0[2][c];
        }
    }
    let two = T::of(2.0);
    let mut gt = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gt[r][c] = two * (g[r][0] * tc[0][c] + g[r][1] * tc[1][c]);
        }
    }
    // T = J W  =>  dL/dJ = dL/dT W^T
    let w = &cam.rotation.0;
    let mut gj = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gj[r][c] = gt[r][0] * w[c][0] + gt[r][1] * w[c][1] + gt[r][2] * w[c][2];
        }
    }

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = T::one() / p.z();
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gp = Vec3::zero();
    // J00 = fx/z, J02 = -fx x/z^2, J11 = fy/z, J12 = -fy y/z^2
    gp[2] += gj[0][0] * (-fx * iz2);
    gp[0] += gj[0][2] * (-fx * iz2);
    gp[2] += gj[0][2] * (two * fx * p.x() * iz3);
    gp[2] += gj[1][1] * (-fy * iz2);
    gp[1] += gj[1][2] * (-fy * iz2);
    gp[2] += gj[1][2] * (two * fy * p.y() * iz3);
    // pixel mean
    gp[0] += grad_mean2[0] * fx * iz;
    gp[2] -= grad_mean2[0] * fx * p.x() * iz2;
    gp[1] += grad_mean2[1] * fy * iz;
    gp[2] -= grad_mean2[1] * fy * p.y() * iz2;
    gp[2] += grad_depth;

    (cam.rotation.transpose().mul_vec(&gp), grad_cov)
}

/// Real spherical-harmonics basis up to degree 1 at unit direction `d`.
#[inline]
pub fn sh_basis<T: Real>(d: &Vec3<T>) -> [T; SH_COEFFS] {
    let c1 = T::of(SH_C1);
    [T::of(SH_C0), -c1 * d.y(), c1 * d.z(), -c1 * d.x()]
}

/// Decoded color `max(0, sum_k f_k Y_k(d) + 0.5)` per channel.
pub fn eval_sh<T: Real>(degree: usize, sh: &[[T; 3]; SH_COEFFS], dir: &Vec3<T>) -> [T; 3] {
    let raw = eval_sh_raw(degree, sh, dir);
    raw.map(|v| v.max(T::zero()))
}

pub(crate) fn eval_sh_raw<T: Real>(degree: usize, sh: &[[T; 3]; SH_COEFFS], dir: &Vec3<T>) -> [T; 3] {
    let basis = sh_basis(dir);
    let n = sh_coeff_count(degree);
    let mut out = [T::of(0.5); 3];
    for c in 0..3 {
        for k in 0..n {
            out[c] += sh[k][c] * basis[k];
        }
    }
    out
}

/// Gradients of [`eval_sh`] w.r.t. coefficients and the (unit) direction.
pub fn eval_sh_backward<T: Real>(
    degree: usize,
    sh: &[[T; 3]; SH_COEFFS],
    dir: &Vec3<T>,
    grad_rgb: [T; 3],
) -> ([[T; 3]; SH_COEFFS], Vec3<T>) {
    let raw = eval_sh_raw(degree, sh, dir);
    let basis = sh_basis(dir);
    let n = sh_coeff_count(degree);
    let mut gsh = [[T::zero(); 3]; SH_COEFFS];
    let mut gdir = Vec3::zero();
    let c1 = T::of(SH_C1);
    for c in 0..3 {
        if !(raw[c] > T::zero()) {
            continue;
        }
        let g = grad_rgb[c];
        for k in 0..n {
            gsh[k][c] = g * basis[k];
        }
        if degree >= 1 {
            gdir[1] -= g * c1 * sh[1][c];
            gdir[2] += g * c1 * sh[2][c];
            gdir[0] -= g * c1 * sh[3][c];
        }
    }
    (gsh, gdir)
}
