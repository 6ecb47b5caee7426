//! Loss terms and their gradients w.r.t. the rendered maps.
//!
//! Images are interleaved row-major `f64` buffers. Every function returns
//! the value and the gradient w.r.t. its first (rendered) argument;
//! uncertainty maps are treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Weight of `1 - SSIM` in the reconstruction loss.
pub const LAMBDA_SSIM: f64 = 0.2;
/// Normalizers below this make the uncertainty-weighted terms vanish.
pub const UA_EPS: f64 = 1e-8;

fn check(name: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ContractViolation(format!("{name}: {a} entries vs {b}")));
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable filtering of a single-channel `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `(w-10) x (h-10)` map back onto
/// the `w x h` plane.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &[f64], c: usize, channels: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

/// Per-channel SSIM maps over window positions fully inside the image.
pub struct SsimMaps {
    /// `channels` maps of `(w - 10) x (h - 10)`.
    pub maps: Vec<Vec<f64>>,
    pub out_width: usize,
    pub out_height: usize,
}

/// SSIM maps of `a` against `b` and, with `want_grad`, the gradient of
/// their overall mean w.r.t. `a`.
pub fn ssim_maps(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize, want_grad: bool) -> Result<(SsimMaps, Option<Vec<f64>>)> {
    check("ssim", a.len(), b.len())?;
    check("ssim", a.len(), w * h * channels)?;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ContractViolation(format!("ssim needs at least 11x11 pixels, got {w}x{h}")));
    }
    let k = gaussian_taps();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let count = (ow * oh * channels) as f64;
    let mut maps = Vec::with_capacity(channels);
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for c in 0..channels {
        let x = channel(a, c, channels);
        let y = channel(b, c, channels);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let n = ow * oh;
        let mut map = vec![0.0; n];
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        let mut gc = vec![0.0; n];
        for i in 0..n {
            let (mux, muy) = (mx[i], my[i]);
            let vx = sxx[i] - mux * mux;
            let vy = syy[i] - muy * muy;
            let cxy = sxy[i] - mux * muy;
            let n1 = 2.0 * mux * muy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = mux * mux + muy * muy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            map[i] = s;
            if want_grad {
                let d = d1 * d2;
                let ds_dmu = (2.0 * muy * n2 - s * 2.0 * mux * d2) / d;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / d;
                // x_p enters mu_x, var_x = E[x^2] - mu_x^2, cov = E[xy] - mu_x mu_y
                ga[i] = (ds_dmu - 2.0 * ds_dvx * mux - ds_dcxy * muy) / count;
                gb[i] = 2.0 * ds_dvx / count;
                gc[i] = ds_dcxy / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let pa = filter_valid_adjoint(&ga, w, h, &k);
            let pb = filter_valid_adjoint(&gb, w, h, &k);
            let pc = filter_valid_adjoint(&gc, w, h, &k);
            for p in 0..w * h {
                g[p * channels + c] = pa[p] + pb[p] * x[p] + pc[p] * y[p];
            }
        }
        maps.push(map);
    }
    Ok((SsimMaps { maps, out_width: ow, out_height: oh }, grad))
}

/// Mean SSIM over channels and window positions, and its gradient w.r.t. `a`.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    let (m, g) = ssim_maps(a, b, w, h, channels, true)?;
    let total: f64 = m.maps.iter().flat_map(|v| v.iter()).sum();
    let count = (m.out_width * m.out_height * channels) as f64;
    Ok((total / count, g.unwrap()))
}

/// `(1 - 0.2) mean|a - b| + 0.2 (1 - SSIM(a, b))` over RGB images.
pub fn loss_recon(rendered: &[f64], target: &[f64], w: usize, h: usize) -> Result<(f64, Vec<f64>)> {
    check("recon", rendered.len(), target.len())?;
    check("recon", rendered.len(), 3 * w * h)?;
    let n = rendered.len() as f64;
    let l1w = 1.0 - LAMBDA_SSIM;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            l1 += (r - t).abs();
            l1w * sign(r - t) / n
        })
        .collect();
    l1 /= n;
    let (s, gs) = ssim(rendered, target, w, h, 3)?;
    for (g, v) in grad.iter_mut().zip(gs) {
        *g -= LAMBDA_SSIM * v;
    }
    Ok((l1w * l1 + LAMBDA_SSIM * (1.0 - s), grad))
}

/// Mean absolute difference over masked entries; `mask` has one flag per
/// pixel and `channels` entries share it.
fn masked_l1(pred: &[f64], target: &[f64], mask: Option<&[bool]>, channels: usize) -> Result<(f64, Vec<f64>)> {
    check("l1", pred.len(), target.len())?;
    if let Some(m) = mask {
        check("l1 mask", m.len() * channels, pred.len())?;
    }
    let on = |i: usize| mask.map_or(true, |m| m[i / channels]);
    let count = (0..pred.len()).filter(|&i| on(i)).count();
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if on(i) {
            let d = pred[i] - target[i];
            sum += d.abs();
            grad[i] = sign(d) / n;
        }
    }
    Ok((sum / n, grad))
}

pub fn loss_depth(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<(f64, Vec<f64>)> {
    masked_l1(pred, target, mask, 1)
}

/// Mean over masked pixel-channels of a two-channel flow map.
pub fn loss_flow(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<(f64, Vec<f64>)> {
    masked_l1(pred, target, mask, 2)
}

/// `|U (I - R)|_2 / |U|_2 + |U (I - R)|_1 / |U|_1` with `U` (one value per
/// pixel) broadcast over the three color channels.
pub fn loss_ua_diff(rendered: &[f64], refined: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>)> {
    check("ua-diff", rendered.len(), refined.len())?;
    check("ua-diff", rendered.len(), 3 * u.len())?;
    let mut grad = vec![0.0; rendered.len()];
    let u1: f64 = u.iter().map(|v| v.abs()).sum();
    let u2: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if u1 < UA_EPS {
        return Ok((0.0, grad));
    }
    let mut n1 = 0.0;
    let mut n2sq = 0.0;
    for i in 0..rendered.len() {
        let e = u[i / 3] * (rendered[i] - refined[i]);
        n1 += e.abs();
        n2sq += e * e;
    }
    let n2 = n2sq.sqrt();
    let mut value = n1 / u1;
    if u2 >= UA_EPS {
        value += n2 / u2;
    }
    for i in 0..rendered.len() {
        let ui = u[i / 3];
        let e = ui * (rendered[i] - refined[i]);
        let mut g = sign(e) * ui / u1;
        if u2 >= UA_EPS && n2 > 0.0 {
            g += e * ui / (n2 * u2);
        }
        grad[i] = g;
    }
    Ok((value, grad))
}

/// Uncertainty-weighted total variation of a depth map. Row and column
/// terms are each normalized by their summed pair weights and vanish when
/// that sum is below [`UA_EPS`].
pub fn loss_ua_tv(depth: &[f64], u: &[f64], w: usize, h: usize) -> Result<(f64, Vec<f64>)> {
    check("ua-tv", depth.len(), u.len())?;
    check("ua-tv", depth.len(), w * h)?;
    if w < 2 || h < 2 {
        return Err(Error::ContractViolation(format!("ua-tv needs at least 2x2 pixels, got {w}x{h}")));
    }
    let mut grad = vec![0.0; depth.len()];
    let mut value = 0.0;
    // (offset to neighbor, pairs) for vertical then horizontal neighbors
    for vertical in [true, false] {
        let pairs: Vec<(usize, usize)> = if vertical {
            (0..h - 1).flat_map(|i| (0..w).map(move |j| (i * w + j, (i + 1) * w + j))).collect()
        } else {
            (0..h).flat_map(|i| (0..w - 1).map(move |j| (i * w + j, i * w + j + 1))).collect()
        };
        let norm: f64 = pairs.iter().map(|&(a, b)| 0.5 * (u[a] + u[b])).sum();
        if norm < UA_EPS {
            continue;
        }
        for &(a, b) in &pairs {
            let wgt = 0.5 * (u[a] + u[b]) / norm;
            let d = depth[a] - depth[b];
            value += wgt * d.abs();
            grad[a] += wgt * sign(d);
            grad[b] -= wgt * sign(d);
        }
    }
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub grid: f64,
    pub data: f64,
    pub ua_diff: f64,
    pub ua_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { grid: 1e-4, data: 0.5, ua_diff: 0.2, ua_tv: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("grid", self.grid), ("data", self.data), ("ua_diff", self.ua_diff), ("ua_tv", self.ua_tv)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub grid: f64,
    pub depth: f64,
    pub flow: f64,
    pub ua_diff: Option<f64>,
    pub ua_tv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub grid: f64,
    pub depth: f64,
    pub flow: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ua_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ua_tv: Option<f64>,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("recon", Some(self.recon)),
            ("grid", Some(self.grid)),
            ("depth", Some(self.depth)),
            ("flow", Some(self.flow)),
            ("ua_diff", self.ua_diff),
            ("ua_tv", self.ua_tv),
            ("total", Some(self.total)),
        ];
        terms.into_iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())).map(|(n, _)| n)
    }
}

/// `recon + l_grid grid + l_data (depth + flow) + l_diff ua_diff + l_tv ua_tv`;
/// the uncertainty terms count only while `ua_active`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, ua_active: bool) -> LossBreakdown {
    let (ua_diff, ua_tv) = if ua_active { (parts.ua_diff, parts.ua_tv) } else { (None, None) };
    let mut total = parts.recon + weights.grid * parts.grid + weights.data * (parts.depth + parts.flow);
    if let Some(v) = ua_diff {
        total += weights.ua_diff * v;
    }
    if let Some(v) = ua_tv {
        total += weights.ua_tv * v;
    }
    LossBreakdown {
        recon: parts.recon,
        grid: parts.grid,
        depth: parts.depth,
        flow: parts.flow,
        ua_diff,
        ua_tv,
        total,
        weights: *weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
    }

    /// SSIM by direct 2D sliding windows with explicit weights.
    fn ssim_reference(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize) -> f64 {
        let k = gaussian_taps();
        let mut total = 0.0;
        let mut n = 0.0;
        for c in 0..ch {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k[i] * k[j];
                            let p = ((y0 + i) * w + x0 + j) * ch + c;
                            mx += wgt * a[p];
                            my += wgt * b[p];
                            sxx += wgt * a[p] * a[p];
                            syy += wgt * b[p] * b[p];
                            sxy += wgt * a[p] * b[p];
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    n += 1.0;
                }
            }
        }
        total / n
    }

    fn recon_reference(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let mut l1 = 0.0;
        for i in 0..a.len() {
            l1 += (a[i] - b[i]).abs();
        }
        0.8 * l1 / a.len() as f64 + 0.2 * (1.0 - ssim_reference(a, b, w, h, 3))
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], stride: usize) {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..x.len()).step_by(stride) {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn recon_examples() {
        let a = random(3 * 16 * 14, 1);
        assert_eq!(loss_recon(&a, &a, 16, 14).unwrap().0, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v * 0.8 + 0.1).collect();
        let shifted: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
        let (v, _) = loss_recon(&b, &shifted, 16, 14).unwrap();
        let s = ssim(&b, &shifted, 16, 14, 3).unwrap().0;
        assert!((v - (0.8 * 0.1 + 0.2 * (1.0 - s))).abs() < 1e-12);
        let c = random(3 * 16 * 14, 2);
        assert!((loss_recon(&a, &c, 16, 14).unwrap().0 - recon_reference(&a, &c, 16, 14)).abs() < 1e-10);
        assert!(loss_recon(&a, &c[1..], 16, 14).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window() {
        let (w, h) = (19, 15);
        let a = random(3 * w * h, 3);
        let b = random(3 * w * h, 4);
        let s = ssim(&a, &b, w, h, 3).unwrap().0;
        assert!((s - ssim_reference(&a, &b, w, h, 3)).abs() < 1e-12);
        assert!((ssim(&a, &a, w, h, 3).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let (w, h) = (13, 12);
        let a = random(3 * w * h, 5);
        let b = random(3 * w * h, 6);
        let (_, g) = loss_recon(&a, &b, w, h).unwrap();
        fd_check(|x| loss_recon(x, &b, w, h).unwrap().0, &a, &g, 7);
    }

    #[test]
    fn depth_and_flow_examples() {
        let d = random(40, 7);
        assert_eq!(loss_depth(&d, &d, None).unwrap().0, 0.0);
        let off: Vec<f64> = d.iter().map(|v| v + 0.5).collect();
        let mask: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        assert!((loss_depth(&d, &off, Some(&mask)).unwrap().0 - 0.5).abs() < 1e-12);
        assert_eq!(loss_depth(&d, &off, Some(&[false; 40])).unwrap().0, 0.0);
        let f = random(80, 8);
        let shifted: Vec<f64> = f.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v }).collect();
        assert!((loss_flow(&f, &shifted, None).unwrap().0 - 0.5).abs() < 1e-12);

        let t = random(80, 9);
        let fm: Vec<bool> = (0..40).map(|i| i % 5 != 1).collect();
        let mut sum = 0.0;
        let mut n = 0.0;
        for p in 0..40 {
            if fm[p] {
                for c in 0..2 {
                    sum += (f[2 * p + c] - t[2 * p + c]).abs();
                    n += 1.0;
                }
            }
        }
        let (v, g) = loss_flow(&f, &t, Some(&fm)).unwrap();
        assert!((v - sum / n).abs() < 1e-10);
        fd_check(|x| loss_flow(x, &t, Some(&fm)).unwrap().0, &f, &g, 1);
    }

    fn ua_diff_reference(a: &[f64], b: &[f64], u: &[f64]) -> f64 {
        let (mut n1, mut n2, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0);
        for p in 0..u.len() {
            d1 += u[p].abs();
            d2 += u[p] * u[p];
            for c in 0..3 {
                let e = u[p] * (a[3 * p + c] - b[3 * p + c]);
                n1 += e.abs();
                n2 += e * e;
            }
        }
        n2.sqrt() / d2.sqrt() + n1 / d1
    }

    #[test]
    fn ua_diff_examples() {
        let n = 30;
        let a = random(3 * n, 10);
        let u = random(n, 11);
        assert_eq!(loss_ua_diff(&a, &a, &u).unwrap().0, 0.0);
        let c = 0.2;
        let b: Vec<f64> = a.iter().map(|v| v - c).collect();
        let ones = vec![1.0; n];
        let v = loss_ua_diff(&a, &b, &ones).unwrap().0;
        assert!((v - ua_diff_reference(&a, &b, &ones)).abs() < 1e-12);
        assert!((v - (c * 3f64.sqrt() + 3.0 * c)).abs() < 1e-12);

        let r = random(3 * n, 12);
        let (v, g) = loss_ua_diff(&a, &r, &u).unwrap();
        assert!((v - ua_diff_reference(&a, &r, &u)).abs() < 1e-10);
        fd_check(|x| loss_ua_diff(x, &r, &u).unwrap().0, &a, &g, 1);

        let mut half = u.clone();
        half[..n / 2].iter_mut().for_each(|v| *v = 0.0);
        let (_, g) = loss_ua_diff(&a, &r, &half).unwrap();
        assert!(g[..3 * (n / 2)].iter().all(|v| *v == 0.0));
        assert_eq!(loss_ua_diff(&a, &r, &vec![0.0; n]).unwrap().0, 0.0);
    }

    fn ua_tv_reference(d: &[f64], u: &[f64], w: usize, h: usize) -> f64 {
        let (mut ur, mut uc, mut sr, mut sc) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    let wgt = (u[i * w + j] + u[(i + 1) * w + j]) / 2.0;
                    ur += wgt;
                    sr += wgt * (d[i * w + j] - d[(i + 1) * w + j]).abs();
                }
                if j + 1 < w {
                    let wgt = (u[i * w + j] + u[i * w + j + 1]) / 2.0;
                    uc += wgt;
                    sc += wgt * (d[i * w + j] - d[i * w + j + 1]).abs();
                }
            }
        }
        sr / ur + sc / uc
    }

    #[test]
    fn ua_tv_examples() {
        let (w, h) = (9, 7);
        let u = random(w * h, 13);
        assert_eq!(loss_ua_tv(&vec![2.5; w * h], &u, w, h).unwrap().0, 0.0);
        let d = random(w * h, 14);
        let (v, g) = loss_ua_tv(&d, &u, w, h).unwrap();
        assert!((v - ua_tv_reference(&d, &u, w, h)).abs() < 1e-10);
        fd_check(|x| loss_ua_tv(x, &u, w, h).unwrap().0, &d, &g, 1);

        let ones = vec![1.0; w * h];
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    rows += (d[i * w + j] - d[(i + 1) * w + j]).abs();
                }
                if j + 1 < w {
                    cols += (d[i * w + j] - d[i * w + j + 1]).abs();
                }
            }
        }
        let expect = rows / ((h - 1) * w) as f64 + cols / (h * (w - 1)) as f64;
        assert!((loss_ua_tv(&d, &ones, w, h).unwrap().0 - expect).abs() < 1e-12);
        assert_eq!(loss_ua_tv(&d, &vec![0.0; w * h], w, h).unwrap().0, 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let parts = LossParts { recon: 1.0, grid: 2.0, depth: 3.0, flow: 4.0, ua_diff: Some(5.0), ua_tv: Some(6.0) };
        let w = LossWeights { grid: 0.1, data: 0.5, ua_diff: 0.2, ua_tv: 0.01 };
        let b = total_loss(&parts, &w, true);
        assert!((b.total - 5.76).abs() < 1e-12);
        let zero = LossWeights { grid: 0.0, data: 0.0, ua_diff: 0.0, ua_tv: 0.0 };
        assert_eq!(total_loss(&parts, &zero, true).total, 1.0);
        let inactive = total_loss(&parts, &w, false);
        assert_eq!(inactive.ua_diff, None);
        assert!((inactive.total - 4.7).abs() < 1e-12);
        let d = LossWeights::default();
        assert_eq!((d.data, d.ua_diff, d.ua_tv), (0.5, 0.2, 0.01));
        let json = serde_json::to_value(&inactive).unwrap();
        assert!(json.get("ua_diff").is_none());
        assert!(serde_json::to_value(&b).unwrap().get("ua_tv").is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ua_losses_are_scale_invariant(seed in 0u64..10_000, scale in 0.01f64..10.0) {
            let (w, h) = (8, 6);
            let a = random(3 * w * h, seed);
            let b = random(3 * w * h, seed + 1);
            let u = random(w * h, seed + 2);
            let us: Vec<f64> = u.iter().map(|v| v * scale).collect();
            let d1 = loss_ua_diff(&a, &b, &u).unwrap().0;
            let d2 = loss_ua_diff(&a, &b, &us).unwrap().0;
            prop_assert!((d1 - d2).abs() < 1e-9);
            let depth = random(w * h, seed + 3);
            let t1 = loss_ua_tv(&depth, &u, w, h).unwrap().0;
            let t2 = loss_ua_tv(&depth, &us, w, h).unwrap().0;
            prop_assert!((t1 - t2).abs() < 1e-9);
        }

        #[test]
        fn losses_are_nonnegative_and_zero_on_identical(seed in 0u64..10_000) {
            let (w, h) = (12, 11);
            let a = random(3 * w * h, seed);
            let b = random(3 * w * h, seed + 1);
            let u = random(w * h, seed + 2);
            let mask: Vec<bool> = u.iter().map(|v| *v > 0.3).collect();
            prop_assert!(loss_recon(&a, &b, w, h).unwrap().0 >= 0.0);
            prop_assert!(loss_recon(&a, &a, w, h).unwrap().0.abs() < 1e-12);
            prop_assert!(loss_ua_diff(&a, &b, &u).unwrap().0 >= 0.0);
            prop_assert_eq!(loss_ua_diff(&a, &a, &u).unwrap().0, 0.0);
            prop_assert!(loss_ua_tv(&u, &u, w, h).unwrap().0 >= 0.0);
            prop_assert_eq!(loss_depth(&u, &u, Some(&mask)).unwrap().0, 0.0);
            prop_assert!(loss_depth(&u, &a[..w * h], Some(&mask)).unwrap().0 >= 0.0);
        }
    }
}
