use super::RenderOutput;
use crate::deformation::{deform_primitive, DeformationField};
use crate::error::Result;
use crate::math::Real;
use crate::scene::{build_covariance, eval_sh, project_gaussian, Camera, Gaussian};

struct OracleSplat {
    index: usize,
    depth: f64,
    mean: [f64; 2],
    /// 2D covariance `[[a, b], [b, c]]`.
    cov: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    uncertainty: f64,
    flow: [f64; 2],
}

/// Per-pixel float64 reference: every primitive at every pixel, no
/// tiling, no skipped contributions, no early termination. All channels
/// are produced; flow is zero without `flow_cam`.
pub fn render_oracle<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
    background: [f64; 3],
    sh_degree: usize,
) -> Result<RenderOutput<f64>> {
    let cam: Camera<f64> = cam.cast();
    let cam2: Option<Camera<f64>> = flow_cam.map(|c| c.cast());
    let field: Option<DeformationField<f64>> = field.map(|f| f.cast());
    let mut splats = Vec::new();
    for (index, p) in prims.iter().enumerate() {
        let p: Gaussian<f64> = p.cast();
        let s = match &field {
            Some(f) => deform_primitive(&p, f, cam.time)?,
            None => crate::deformation::apply_deformation(
                &p.mean,
                &p.rotation,
                &p.log_scale,
                &crate::deformation::Deformation::zero(),
            )?,
        };
        let cov3 = build_covariance(&s.rotation, &s.log_scale)?;
        let Some(proj) = project_gaussian(&s.mean, &cov3, &cam) else {
            continue;
        };
        let c = proj.splat.cov;
        if !(c.a * c.c - c.b * c.b > 0.0) {
            continue;
        }
        let dir = (s.mean - cam.center()).normalized();
        let color = eval_sh(sh_degree, &p.sh, &dir);
        let mut flow = [0.0; 2];
        if let Some(c2) = &cam2 {
            let m2 = match &field {
                Some(f) => deform_primitive(&p, f, c2.time)?.mean,
                None => p.mean,
            };
            if let Some((q, _)) = c2.project(&m2) {
                flow = [q[0] - proj.splat.mean[0], q[1] - proj.splat.mean[1]];
            }
        }
        splats.push(OracleSplat {
            index,
            depth: proj.depth,
            mean: proj.splat.mean,
            cov: [c.a, c.b, c.c],
            opacity: 1.0 / (1.0 + (-p.opacity_logit).exp()),
            color,
            uncertainty: p.uncertainty,
            flow,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));

    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; 3 * w * h],
        depth: vec![0.0; w * h],
        uncertainty: vec![0.0; w * h],
        flow: vec![0.0; 2 * w * h],
        alpha: vec![0.0; w * h],
        contributions: vec![0.0; prims.len()],
    };
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            let mut transmittance = 1.0;
            for s in &splats {
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                let det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
                let q = (s.cov[2] * dx * dx - 2.0 * s.cov[1] * dx * dy + s.cov[0] * dy * dy) / det;
                let a = s.opacity * (-0.5 * q).exp();
                let wgt = transmittance * a;
                for c in 0..3 {
                    out.color[3 * i + c] += wgt * s.color[c];
                }
                out.depth[i] += wgt * s.depth;
                out.uncertainty[i] += wgt * s.uncertainty;
                out.flow[2 * i] += wgt * s.flow[0];
                out.flow[2 * i + 1] += wgt * s.flow[1];
                out.alpha[i] += wgt;
                out.contributions[s.index] += wgt;
                transmittance *= 1.0 - a;
            }
            for c in 0..3 {
                out.color[3 * i + c] += (1.0 - out.alpha[i]) * background[c];
            }
        }
    }
    Ok(out)
}
