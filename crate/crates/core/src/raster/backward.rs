use rayon::prelude::*;

use super::forward::{fingerprint, RenderState, TileBins};
use super::preprocess::{prepare, SortedSplatList};
use super::{RenderOptions, MIN_ALPHA};
use crate::deformation::{DeformationField, DEFORM_OUT};
use crate::error::{Error, Result};
use crate::math::{quat_normalize_backward, Real, Sym2, Vec3};
use crate::scene::{build_covariance_backward, eval_sh_backward, project_gaussian_backward, Camera, Gaussian};

/// Upstream gradients of a scalar loss w.r.t. the rendered maps, in the
/// layout of [`super::RenderOutput`]. `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct PixelGrads<T> {
    pub color: Option<Vec<T>>,
    pub depth: Option<Vec<T>>,
    pub flow: Option<Vec<T>>,
    pub uncertainty: Option<Vec<T>>,
    pub alpha: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients<T> {
    /// Per primitive, in [`Gaussian::params`] order.
    pub prims: Vec<[T; 23]>,
    /// Deformation parameters; empty when no field was given or requested.
    pub field: Vec<T>,
}

/// Gradient w.r.t. the per-view quantities of one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad<T> {
    mean2: [T; 2],
    /// `b` is the shared off-diagonal variable.
    conic: Sym2<T>,
    opacity: T,
    color: [T; 3],
    depth: T,
    flow: [T; 2],
}

impl<T: Real> SplatGrad<T> {
    fn zero() -> Self {
        Self {
            mean2: [T::zero(); 2],
            conic: Sym2::new(T::zero(), T::zero(), T::zero()),
            opacity: T::zero(),
            color: [T::zero(); 3],
            depth: T::zero(),
            flow: [T::zero(); 2],
        }
    }

    fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean2[k] += o.mean2[k];
            self.flow[k] += o.flow[k];
        }
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
        self.conic.a += o.conic.a;
        self.conic.b += o.conic.b;
        self.conic.c += o.conic.c;
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn check_len<T>(name: &str, v: &Option<Vec<T>>, expect: usize) -> Result<()> {
    match v {
        Some(v) if v.len() != expect => Err(Error::ContractViolation(format!(
            "upstream {name} gradient has {} entries, expected {expect}",
            v.len()
        ))),
        _ => Ok(()),
    }
}

#[inline]
fn at<T: Real>(v: &Option<Vec<T>>, i: usize) -> T {
    v.as_ref().map_or(T::zero(), |v| v[i])
}

struct Entry<T> {
    li: usize,
    a: T,
    g: T,
    t: T,
}

fn backward_tile<T: Real>(
    tile: usize,
    list: &SortedSplatList<T>,
    bins: &TileBins,
    state: &RenderState<T>,
    grads: &PixelGrads<T>,
) -> Vec<SplatGrad<T>> {
    let (w, h) = (state.width, state.height);
    let (x0, y0, x1, y1) = bins.rect(tile, w, h);
    let entries = &bins.lists[tile];
    let mut acc = vec![SplatGrad::zero(); entries.len()];
    if entries.is_empty() {
        return acc;
    }
    let opts: &RenderOptions = &state.options;
    let min_alpha = T::of(MIN_ALPHA);
    let one = T::one();
    let half = T::of(0.5);
    let bg = opts.background.map(T::of);
    let mut stack: Vec<Entry<T>> = Vec::new();
    for y in y0..y1 {
        let py = T::of(y as f64 + 0.5);
        for x in x0..x1 {
            let i = y * w + x;
            let gc = [at(&grads.color, 3 * i), at(&grads.color, 3 * i + 1), at(&grads.color, 3 * i + 2)];
            let gd = at(&grads.depth, i);
            let gf = [at(&grads.flow, 2 * i), at(&grads.flow, 2 * i + 1)];
            let gu = at(&grads.uncertainty, i);
            let ga = at(&grads.alpha, i);
            let zero = T::zero();
            if gc.iter().all(|v| *v == zero) && gd == zero && gf.iter().all(|v| *v == zero) && gu == zero && ga == zero {
                continue;
            }
            let px = T::of(x as f64 + 0.5);

            // replay the forward list
            stack.clear();
            let mut t = one;
            for (li, &pos) in entries[..state.visited[i] as usize].iter().enumerate() {
                let s = &list.splats[pos as usize];
                let (a, g) = s.alpha_at(px, py);
                if !opts.exact && a < min_alpha {
                    continue;
                }
                stack.push(Entry { li, a, g, t });
                t *= one - a;
            }

            // back to front: r_* is the composite of everything behind
            let mut r_color = bg;
            let mut r_depth = zero;
            let mut r_unc = zero;
            let mut r_flow = [zero; 2];
            let mut r_alpha = zero;
            for e in stack.iter().rev() {
                let s = &list.splats[entries[e.li] as usize];
                let wgt = e.t * e.a;
                let mut g_a = zero;
                let sg = &mut acc[e.li];
                for c in 0..3 {
                    g_a += gc[c] * (s.color[c] - r_color[c]);
                    sg.color[c] += gc[c] * wgt;
                    r_color[c] = e.a * s.color[c] + (one - e.a) * r_color[c];
                }
                g_a += gd * (s.depth - r_depth);
                sg.depth += gd * wgt;
                r_depth = e.a * s.depth + (one - e.a) * r_depth;
                g_a += gu * (s.uncertainty - r_unc);
                r_unc = e.a * s.uncertainty + (one - e.a) * r_unc;
                for k in 0..2 {
                    g_a += gf[k] * (s.flow[k] - r_flow[k]);
                    sg.flow[k] += gf[k] * wgt;
                    r_flow[k] = e.a * s.flow[k] + (one - e.a) * r_flow[k];
                }
                g_a += ga * (one - r_alpha);
                r_alpha = e.a + (one - e.a) * r_alpha;
                g_a *= e.t;

                // a = opacity * exp(-q / 2)
                sg.opacity += g_a * e.g;
                let g_g = g_a * s.opacity * e.g;
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                let k = &s.conic;
                sg.mean2[0] += g_g * (k.a * dx + k.b * dy);
                sg.mean2[1] += g_g * (k.b * dx + k.c * dy);
                sg.conic.a -= half * g_g * dx * dx;
                sg.conic.b -= g_g * dx * dy;
                sg.conic.c -= half * g_g * dy * dy;
            }
        }
    }
    acc
}

/// Gradients of a scalar loss w.r.t. primitive and deformation parameters,
/// given its gradients w.r.t. the maps produced by [`super::render`] with
/// the same inputs. `field_grad` selects whether deformation gradients are
/// computed.
pub fn render_backward<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
    state: &RenderState<T>,
    grads: &PixelGrads<T>,
    field_grad: bool,
) -> Result<RenderGradients<T>> {
    let n = cam.width * cam.height;
    if state.width != cam.width || state.height != cam.height {
        return Err(Error::ContractViolation("camera size differs from the forward pass".into()));
    }
    if state.with_flow != (flow_cam.is_some() && state.options.channels.flow) {
        return Err(Error::ContractViolation("flow target differs from the forward pass".into()));
    }
    if state.fingerprint != fingerprint(prims, field, cam, flow_cam) {
        return Err(Error::ContractViolation("inputs differ from the forward pass".into()));
    }
    check_len("color", &grads.color, 3 * n)?;
    check_len("depth", &grads.depth, n)?;
    check_len("flow", &grads.flow, 2 * n)?;
    check_len("uncertainty", &grads.uncertainty, n)?;
    check_len("alpha", &grads.alpha, n)?;

    let list = &state.splats;
    let bins = &state.bins;
    let tiles: Vec<Vec<SplatGrad<T>>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| backward_tile(t, list, bins, state, grads))
        .collect();
    let mut per_splat = vec![SplatGrad::zero(); list.len()];
    for (t, acc) in tiles.iter().enumerate() {
        for (li, g) in acc.iter().enumerate() {
            per_splat[bins.lists[t][li] as usize].add(g);
        }
    }

    let opts = &state.options;
    let mut out = RenderGradients {
        prims: vec![[T::zero(); 23]; prims.len()],
        field: match (field, field_grad) {
            (Some(f), true) => vec![T::zero(); f.params.len()],
            _ => Vec::new(),
        },
    };
    let half = T::of(0.5);
    let two = T::of(2.0);
    for (pos, sg) in per_splat.iter().enumerate() {
        let idx = list.splats[pos].index;
        let prim = &prims[idx];
        let Some(p) = prepare(idx, prim, field, cam, flow_cam, opts)? else {
            return Err(Error::ContractViolation(format!("primitive {idx} is no longer visible")));
        };
        let g = &mut out.prims[idx];

        // SH color
        let mut g_mean_t = Vec3::zero();
        if opts.channels.color {
            let v = p.mean_t - cam.center();
            let len = v.norm();
            let dir = v * (T::one() / len);
            let (g_sh, g_dir) = eval_sh_backward(opts.sh_degree, &prim.sh, &dir, sg.color);
            for k in 0..g_sh.len() {
                for c in 0..3 {
                    g[11 + 3 * k + c] += g_sh[k][c];
                }
            }
            g_mean_t += (g_dir - dir * dir.dot(&g_dir)) * (T::one() / len);
        }

        // opacity logit
        let a = p.splat.opacity;
        g[10] += sg.opacity * a * (T::one() - a);

        // conic -> 2D covariance (shared off-diagonal convention)
        let m = Sym2::new(sg.conic.a, half * sg.conic.b, sg.conic.c);
        let kmk = p.splat.conic.sandwich(&m);
        let g_cov2 = Sym2::new(-kmk.a, -two * kmk.b, -kmk.c);

        let mut g_mean2 = sg.mean2;
        if p.flow_visible {
            g_mean2[0] -= sg.flow[0];
            g_mean2[1] -= sg.flow[1];
        }
        let (g_proj, g_cov3) = project_gaussian_backward(&p.mean_t, &p.cov3, cam, g_mean2, g_cov2, sg.depth);
        g_mean_t += g_proj;
        let (g_q_unit, g_ls_t) = build_covariance_backward(&p.q_unit, &p.log_scale_t, &g_cov3);
        let g_q_raw = quat_normalize_backward(&p.q_raw, &g_q_unit);

        for k in 0..3 {
            g[k] += g_mean_t[k];
            g[7 + k] += g_ls_t[k];
        }
        for k in 0..4 {
            g[3 + k] += g_q_raw[k];
        }

        // second-frame center of the flow payload
        let mut g_mean_t2 = Vec3::zero();
        if p.flow_visible && (sg.flow[0] != T::zero() || sg.flow[1] != T::zero()) {
            let cam2 = flow_cam.expect("flow tape without a flow camera");
            let c = cam2.to_camera(&p.mean_t2);
            let iz = T::one() / c.z();
            let gc = Vec3::new(
                sg.flow[0] * cam2.fx * iz,
                sg.flow[1] * cam2.fy * iz,
                -(sg.flow[0] * cam2.fx * c.x() + sg.flow[1] * cam2.fy * c.y()) * iz * iz,
            );
            g_mean_t2 = cam2.rotation.transpose().mul_vec(&gc);
            for k in 0..3 {
                g[k] += g_mean_t2[k];
            }
        }

        if let Some(f) = field {
            let mut go = [T::zero(); DEFORM_OUT];
            go[0..3].copy_from_slice(&g_mean_t.0);
            go[3..7].copy_from_slice(&g_q_raw);
            go[7..10].copy_from_slice(&g_ls_t.0);
            let tape = p.tape.as_ref().expect("field query without a tape");
            let target = if field_grad { Some(&mut out.field[..]) } else { None };
            let gm = f.backward(tape, &go, target);
            for k in 0..3 {
                g[k] += gm[k];
            }
            if let Some(tape2) = p.flow_tape.as_ref() {
                let mut go2 = [T::zero(); DEFORM_OUT];
                go2[0..3].copy_from_slice(&g_mean_t2.0);
                let target = if field_grad { Some(&mut out.field[..]) } else { None };
                let gm2 = f.backward(tape2, &go2, target);
                for k in 0..3 {
                    g[k] += gm2[k];
                }
            }
        }
    }
    Ok(out)
}
