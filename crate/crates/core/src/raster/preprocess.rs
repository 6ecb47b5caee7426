use rayon::prelude::*;

use super::RenderOptions;
use crate::deformation::{apply_deformation, Deformation, DeformationField, QueryTape};
use crate::error::Result;
use crate::math::{quat_to_mat, Mat3, Quat, Real, Sym2, Vec3};
use crate::scene::{covariance_from_rotation, eval_sh, project_gaussian, Camera, Gaussian};

/// One projected primitive with its per-view payload.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat<T> {
    /// Index into the input primitive list.
    pub index: usize,
    pub mean: [T; 2],
    /// Inverse of the 2D covariance.
    pub conic: Sym2<T>,
    pub depth: T,
    pub opacity: T,
    pub color: [T; 3],
    pub uncertainty: T,
    pub flow: [T; 2],
    /// Pixels farther than this from `mean` cannot pass the cull threshold.
    pub radius: T,
}

impl<T: Real> Splat<T> {
    /// `(alpha * G, G)` at pixel coordinate `(px, py)`.
    #[inline]
    pub fn alpha_at(&self, px: T, py: T) -> (T, T) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let g = (-T::of(0.5) * self.conic.quad(dx, dy)).exp();
        (self.opacity * g, g)
    }
}

/// Splats sorted by depth, ties broken by primitive index.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedSplatList<T> {
    pub splats: Vec<Splat<T>>,
}

impl<T: Real> SortedSplatList<T> {
    pub fn from_unsorted(mut splats: Vec<Splat<T>>) -> Self {
        splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
        Self { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// `(primitive index, w)` for every splat that contributes to pixel
    /// coordinate `r`, front to back. With `exact` set nothing is skipped
    /// and blending never stops early.
    pub fn blend_weights(&self, r: [T; 2], exact: bool) -> Vec<(usize, T)> {
        let min_alpha = T::of(super::MIN_ALPHA);
        let min_t = T::of(super::MIN_TRANSMITTANCE);
        let mut t = T::one();
        let mut out = Vec::new();
        for s in &self.splats {
            let (a, _) = s.alpha_at(r[0], r[1]);
            if !exact && a < min_alpha {
                continue;
            }
            out.push((s.index, t * a));
            t *= T::one() - a;
            if !exact && t < min_t {
                break;
            }
        }
        out
    }
}

/// Everything derived from one primitive for one view; the backward pass
/// needs the intermediates.
pub(crate) struct Prepared<T> {
    pub splat: Splat<T>,
    pub q_raw: Quat<T>,
    pub q_unit: Quat<T>,
    pub mean_t: Vec3<T>,
    pub log_scale_t: Vec3<T>,
    pub cov3: Mat3<T>,
    pub tape: Option<QueryTape<T>>,
    /// Tape of the second-time query and whether the center is in front of
    /// the second camera's near plane.
    pub flow_tape: Option<QueryTape<T>>,
    pub flow_visible: bool,
    pub mean_t2: Vec3<T>,
}

pub(crate) fn prepare<T: Real>(
    index: usize,
    prim: &Gaussian<T>,
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
    opts: &RenderOptions,
) -> Result<Option<Prepared<T>>> {
    let (d, tape) = match field {
        Some(f) => {
            let (d, tape) = f.query_with_tape(&prim.mean, cam.time);
            (d, Some(tape))
        }
        None => (Deformation::zero(), None),
    };
    let state = apply_deformation(&prim.mean, &prim.rotation, &prim.log_scale, &d)?;
    let mut q_raw = prim.rotation;
    for i in 0..4 {
        q_raw[i] += d.d_rotation[i];
    }
    let r = quat_to_mat(&state.rotation);
    let cov3 = covariance_from_rotation(&r, &state.log_scale);
    let Some(proj) = project_gaussian(&state.mean, &cov3, cam) else {
        return Ok(None);
    };
    let Some(conic) = proj.splat.cov.inverse() else {
        return Ok(None);
    };
    let opacity = prim.opacity();
    let eps = T::of(opts.cull_eps());
    if !(opacity > eps) {
        return Ok(None);
    }
    let r2 = T::of(2.0) * (opacity / eps).ln() * proj.splat.cov.max_eigenvalue();
    let radius = r2.sqrt() * T::of(1.0 + 1e-6) + T::of(1e-3);

    let color = if opts.channels.color {
        let dir = (state.mean - cam.center()).normalized();
        eval_sh(opts.sh_degree, &prim.sh, &dir)
    } else {
        [T::zero(); 3]
    };

    let mut flow = [T::zero(); 2];
    let mut flow_tape = None;
    let mut flow_visible = false;
    let mut mean_t2 = prim.mean;
    if let (Some(cam2), true) = (flow_cam, opts.channels.flow) {
        let d2 = match field {
            Some(f) => {
                let (d2, tape2) = f.query_with_tape(&prim.mean, cam2.time);
                flow_tape = Some(tape2);
                d2.d_mean
            }
            None => Vec3::zero(),
        };
        mean_t2 = prim.mean + d2;
        if let Some((p2, _)) = cam2.project(&mean_t2) {
            flow = [p2[0] - proj.splat.mean[0], p2[1] - proj.splat.mean[1]];
            flow_visible = true;
        }
    }

    Ok(Some(Prepared {
        splat: Splat {
            index,
            mean: proj.splat.mean,
            conic,
            depth: proj.depth,
            opacity,
            color,
            uncertainty: prim.uncertainty,
            flow,
            radius,
        },
        q_raw,
        q_unit: state.rotation,
        mean_t: state.mean,
        log_scale_t: state.log_scale,
        cov3,
        tape,
        flow_tape,
        flow_visible,
        mean_t2,
    }))
}

/// Deforms, projects, and depth-sorts `prims` for camera `cam` at its own
/// time. With `flow_cam`, each splat also carries its image displacement to
/// that camera and time.
pub fn preprocess<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
    opts: &RenderOptions,
) -> Result<SortedSplatList<T>> {
    let splats: Vec<Option<Splat<T>>> = prims
        .par_iter()
        .enumerate()
        .map(|(i, p)| prepare(i, p, field, cam, flow_cam, opts).map(|o| o.map(|p| p.splat)))
        .collect::<Result<_>>()?;
    Ok(SortedSplatList::from_unsorted(splats.into_iter().flatten().collect()))
}
