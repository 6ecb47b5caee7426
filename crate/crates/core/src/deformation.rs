//! Time-conditioned deformation of canonical primitives.
//!
//! Six factored feature planes (xy, xz, yz, xt, yt, zt) are sampled
//! bilinearly, fused by elementwise product, and decoded by a two-layer
//! perceptron into `(d_mean, d_rotation, d_log_scale)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_norm, Quat, Real, Vec3};

/// Decoder output width: 3 (mean) + 4 (rotation) + 3 (log-scale).
pub const DEFORM_OUT: usize = 10;

/// Axes of the six planes; index 3 is time.
pub const PLANES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn unit() -> Self {
        Self { min: [-1.0; 3], max: [1.0; 3] }
    }

    /// Bounds of `points` grown by `margin` times the extent on each side.
    pub fn around(points: impl IntoIterator<Item = [f64; 3]>, margin: f64) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        if !min[0].is_finite() {
            return Self::unit();
        }
        for k in 0..3 {
            let ext = (max[k] - min[k]).max(1e-3);
            min[k] -= margin * ext;
            max[k] += margin * ext;
        }
        Self { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub space_resolution: usize,
    pub time_resolution: usize,
    pub bounds: Aabb,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden_dim: 32,
            space_resolution: 16,
            time_resolution: 16,
            bounds: Aabb::unit(),
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.space_resolution < 2 || self.time_resolution < 2 {
            return Err(Error::InvalidParameter("grid resolutions must be at least 2".into()));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter("feature and hidden sizes must be non-zero".into()));
        }
        for k in 0..3 {
            if !(self.bounds.max[k] > self.bounds.min[k]) {
                return Err(Error::InvalidParameter("empty normalization box".into()));
            }
        }
        Ok(())
    }

    fn resolution(&self, axis: usize) -> usize {
        if axis == 3 {
            self.time_resolution
        } else {
            self.space_resolution
        }
    }

    /// `(res_u, res_v)` of plane `p`.
    pub fn plane_shape(&self, p: usize) -> (usize, usize) {
        let (a, b) = PLANES[p];
        (self.resolution(a), self.resolution(b))
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub planes: [usize; 6],
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let mut off = 0;
        let mut planes = [0; 6];
        for (p, slot) in planes.iter_mut().enumerate() {
            *slot = off;
            let (ru, rv) = cfg.plane_shape(p);
            off += ru * rv * cfg.feature_dim;
        }
        let w1 = off;
        off += cfg.hidden_dim * cfg.feature_dim;
        let b1 = off;
        off += cfg.hidden_dim;
        let w2 = off;
        off += DEFORM_OUT * cfg.hidden_dim;
        let b2 = off;
        off += DEFORM_OUT;
        Self { planes, w1, b1, w2, b2, len: off }
    }

    /// Number of parameters that belong to the feature planes.
    pub fn grid_len(&self) -> usize {
        self.w1
    }
}

/// Deformation of one primitive at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformation<T> {
    pub d_mean: Vec3<T>,
    pub d_rotation: Quat<T>,
    pub d_log_scale: Vec3<T>,
}

impl<T: Real> Deformation<T> {
    pub fn zero() -> Self {
        Self { d_mean: Vec3::zero(), d_rotation: [T::zero(); 4], d_log_scale: Vec3::zero() }
    }

    fn from_out(o: &[T]) -> Self {
        Self {
            d_mean: Vec3::new(o[0], o[1], o[2]),
            d_rotation: [o[3], o[4], o[5], o[6]],
            d_log_scale: Vec3::new(o[7], o[8], o[9]),
        }
    }

    pub fn as_array(&self) -> [T; DEFORM_OUT] {
        let mut o = [T::zero(); DEFORM_OUT];
        o[0..3].copy_from_slice(&self.d_mean.0);
        o[3..7].copy_from_slice(&self.d_rotation);
        o[7..10].copy_from_slice(&self.d_log_scale.0);
        o
    }
}

/// Canonical state moved to time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformedState<T> {
    pub mean: Vec3<T>,
    /// Unit quaternion.
    pub rotation: Quat<T>,
    pub log_scale: Vec3<T>,
}

/// Per-plane bilinear sample location.
#[derive(Clone, Copy, Debug, Default)]
struct Sample<T> {
    iu: usize,
    iv: usize,
    fu: T,
    fv: T,
    /// d(grid u)/d(axis coordinate), zero when clamped.
    du: T,
    dv: T,
}

/// Intermediate values of one query, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct QueryTape<T> {
    samples: [Sample<T>; 6],
    plane_feats: Vec<T>,
    fused: Vec<T>,
    pre: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    pub config: FieldConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

impl<T: Real> DeformationField<T> {
    /// Space planes uniform in `[0.1, 0.5]`, time planes at 1, a Xavier
    /// first layer, and an all-zero output layer (identity deformation).
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in 0..6 {
            let (ru, rv) = config.plane_shape(p);
            let start = layout.planes[p];
            let n = ru * rv * config.feature_dim;
            let time_plane = PLANES[p].1 == 3;
            for v in &mut params[start..start + n] {
                *v = if time_plane { T::one() } else { T::of(rng.gen_range(0.1..0.5)) };
            }
        }
        let (f, h) = (config.feature_dim, config.hidden_dim);
        let bound = (6.0 / (f + h) as f64).sqrt();
        for v in &mut params[layout.w1..layout.w1 + h * f] {
            *v = T::of(rng.gen_range(-bound..bound));
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: FieldConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len {
            return Err(Error::ShapeMismatch(format!(
                "deformation field expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn cast<U: Real>(&self) -> DeformationField<U> {
        DeformationField {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Makes the decoder output the constant `out` everywhere.
    pub fn set_constant(&mut self, out: [T; DEFORM_OUT]) {
        let l = &self.layout;
        for v in &mut self.params[l.w2..l.b2] {
            *v = T::zero();
        }
        self.params[l.b2..l.b2 + DEFORM_OUT].copy_from_slice(&out);
    }

    /// Fills every plane cell with the feature vector `feature`.
    pub fn fill_planes(&mut self, feature: &[T]) {
        assert_eq!(feature.len(), self.config.feature_dim);
        let f = self.config.feature_dim;
        for chunk in self.params[..self.layout.grid_len()].chunks_mut(f) {
            chunk.copy_from_slice(feature);
        }
    }

    /// Whether the output layer is identically zero.
    pub fn is_identity(&self) -> bool {
        let l = &self.layout;
        self.params[l.w2..l.b2 + DEFORM_OUT].iter().all(|v| *v == T::zero())
    }

    fn axis_coord(&self, axis: usize, mean: &Vec3<T>, t: T) -> (T, T) {
        let res = self.config.resolution(axis);
        let scale = T::of((res - 1) as f64);
        let (u, du) = if axis == 3 {
            (t, T::one())
        } else {
            let lo = T::of(self.config.bounds.min[axis]);
            let ext = T::of(self.config.bounds.max[axis] - self.config.bounds.min[axis]);
            ((mean[axis] - lo) / ext, T::one() / ext)
        };
        if u < T::zero() {
            (T::zero(), T::zero())
        } else if u > T::one() {
            (scale, T::zero())
        } else {
            (u * scale, du * scale)
        }
    }

    fn sample(&self, p: usize, mean: &Vec3<T>, t: T) -> Sample<T> {
        let (a, b) = PLANES[p];
        let (ru, rv) = self.config.plane_shape(p);
        let (gu, du) = self.axis_coord(a, mean, t);
        let (gv, dv) = self.axis_coord(b, mean, t);
        let iu = (gu.floor().as_f64() as usize).min(ru - 2);
        let iv = (gv.floor().as_f64() as usize).min(rv - 2);
        Sample { iu, iv, fu: gu - T::of(iu as f64), fv: gv - T::of(iv as f64), du, dv }
    }

    #[inline]
    fn cell(&self, p: usize, iu: usize, iv: usize) -> usize {
        let (ru, _) = self.config.plane_shape(p);
        self.layout.planes[p] + (iv * ru + iu) * self.config.feature_dim
    }

    /// Bilinearly interpolated feature of plane `p`, written to `out`.
    fn interpolate(&self, p: usize, s: &Sample<T>, out: &mut [T]) {
        let f = self.config.feature_dim;
        let one = T::one();
        let w = [(one - s.fu) * (one - s.fv), s.fu * (one - s.fv), (one - s.fu) * s.fv, s.fu * s.fv];
        let c = [
            self.cell(p, s.iu, s.iv),
            self.cell(p, s.iu + 1, s.iv),
            self.cell(p, s.iu, s.iv + 1),
            self.cell(p, s.iu + 1, s.iv + 1),
        ];
        for k in 0..f {
            out[k] = w[0] * self.params[c[0] + k]
                + w[1] * self.params[c[1] + k]
                + w[2] * self.params[c[2] + k]
                + w[3] * self.params[c[3] + k];
        }
    }

    /// `(d_mean, d_rotation, d_log_scale)` at canonical position `mean` and
    /// time `t`; positions outside the box and times outside `[0, 1]` clamp.
    pub fn query(&self, mean: &Vec3<T>, t: T) -> Deformation<T> {
        self.query_with_tape(mean, t).0
    }

    pub fn query_with_tape(&self, mean: &Vec3<T>, t: T) -> (Deformation<T>, QueryTape<T>) {
        let f = self.config.feature_dim;
        let h = self.config.hidden_dim;
        let mut samples = [Sample::default(); 6];
        let mut plane_feats = vec![T::zero(); 6 * f];
        let mut fused = vec![T::one(); f];
        for p in 0..6 {
            samples[p] = self.sample(p, mean, t);
            self.interpolate(p, &samples[p], &mut plane_feats[p * f..(p + 1) * f]);
            for k in 0..f {
                fused[k] *= plane_feats[p * f + k];
            }
        }
        let l = &self.layout;
        let mut pre = vec![T::zero(); h];
        let mut hidden = vec![T::zero(); h];
        for j in 0..h {
            let row = &self.params[l.w1 + j * f..l.w1 + (j + 1) * f];
            let mut acc = self.params[l.b1 + j];
            for k in 0..f {
                acc += row[k] * fused[k];
            }
            pre[j] = acc;
            hidden[j] = acc.max(T::zero());
        }
        let mut out = [T::zero(); DEFORM_OUT];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.params[l.w2 + o * h..l.w2 + (o + 1) * h];
            let mut acc = self.params[l.b2 + o];
            for j in 0..h {
                acc += row[j] * hidden[j];
            }
            *slot = acc;
        }
        (Deformation::from_out(&out), QueryTape { samples, plane_feats, fused, pre, hidden })
    }

    /// Accumulates parameter gradients into `grad_params` (when given) and
    /// returns the gradient w.r.t. the query position.
    pub fn backward(
        &self,
        tape: &QueryTape<T>,
        grad_out: &[T; DEFORM_OUT],
        mut grad_params: Option<&mut [T]>,
    ) -> Vec3<T> {
        let f = self.config.feature_dim;
        let h = self.config.hidden_dim;
        let l = &self.layout;
        if grad_out.iter().all(|g| *g == T::zero()) {
            return Vec3::zero();
        }
        let mut g_hidden = vec![T::zero(); h];
        for o in 0..DEFORM_OUT {
            let g = grad_out[o];
            if g == T::zero() {
                continue;
            }
            if let Some(gp) = grad_params.as_deref_mut() {
                gp[l.b2 + o] += g;
            }
            let base = l.w2 + o * h;
            for j in 0..h {
                if let Some(gp) = grad_params.as_deref_mut() {
                gp[base + j] += g * tape.hidden[j];
            }
                g_hidden[j] += g * self.params[base + j];
            }
        }
        let mut g_fused = vec![T::zero(); f];
        for j in 0..h {
            if !(tape.pre[j] > T::zero()) {
                continue;
            }
            let g = g_hidden[j];
            if let Some(gp) = grad_params.as_deref_mut() {
                gp[l.b1 + j] += g;
            }
            let base = l.w1 + j * f;
            for k in 0..f {
                if let Some(gp) = grad_params.as_deref_mut() {
                gp[base + k] += g * tape.fused[k];
            }
                g_fused[k] += g * self.params[base + k];
            }
        }
        let mut g_mean = Vec3::zero();
        let one = T::one();
        for p in 0..6 {
            let s = &tape.samples[p];
            let (a, b) = PLANES[p];
            let w = [(one - s.fu) * (one - s.fv), s.fu * (one - s.fv), (one - s.fu) * s.fv, s.fu * s.fv];
            let c = [
                self.cell(p, s.iu, s.iv),
                self.cell(p, s.iu + 1, s.iv),
                self.cell(p, s.iu, s.iv + 1),
                self.cell(p, s.iu + 1, s.iv + 1),
            ];
            let mut g_fu = T::zero();
            let mut g_fv = T::zero();
            for k in 0..f {
                // product of the other five planes
                let mut others = one;
                for q in 0..6 {
                    if q != p {
                        others *= tape.plane_feats[q * f + k];
                    }
                }
                let g = g_fused[k] * others;
                if g == T::zero() {
                    continue;
                }
                let v = [self.params[c[0] + k], self.params[c[1] + k], self.params[c[2] + k], self.params[c[3] + k]];
                if let Some(gp) = grad_params.as_deref_mut() {
                    for corner in 0..4 {
                        gp[c[corner] + k] += g * w[corner];
                    }
                }
                g_fu += g * ((v[1] - v[0]) * (one - s.fv) + (v[3] - v[2]) * s.fv);
                g_fv += g * ((v[2] - v[0]) * (one - s.fu) + (v[3] - v[1]) * s.fu);
            }
            if a < 3 {
                g_mean[a] += g_fu * s.du;
            }
            if b < 3 {
                g_mean[b] += g_fv * s.dv;
            }
        }
        g_mean
    }

    /// Mean squared difference of adjacent plane cells, over every plane,
    /// both axes, and every feature channel.
    pub fn grid_smoothness(&self) -> T {
        let (sum, count) = self.smoothness_terms(None);
        if count == 0 {
            T::zero()
        } else {
            sum / T::of(count as f64)
        }
    }

    /// Adds `scale * d(grid_smoothness)/d(params)` into `grad`.
    pub fn grid_smoothness_backward(&self, scale: T, grad: &mut [T]) {
        self.smoothness_terms(Some((scale, grad)));
    }

    fn smoothness_terms(&self, mut grad: Option<(T, &mut [T])>) -> (T, usize) {
        let f = self.config.feature_dim;
        let mut count = 0usize;
        for p in 0..6 {
            let (ru, rv) = self.config.plane_shape(p);
            count += f * ((ru - 1) * rv + ru * (rv - 1));
        }
        let norm = T::of(2.0) / T::of(count as f64);
        let mut sum = T::zero();
        for p in 0..6 {
            let (ru, rv) = self.config.plane_shape(p);
            for iv in 0..rv {
                for iu in 0..ru {
                    let a = self.cell(p, iu, iv);
                    let mut neighbors = [None, None];
                    if iu + 1 < ru {
                        neighbors[0] = Some(self.cell(p, iu + 1, iv));
                    }
                    if iv + 1 < rv {
                        neighbors[1] = Some(self.cell(p, iu, iv + 1));
                    }
                    for b in neighbors.into_iter().flatten() {
                        for k in 0..f {
                            let d = self.params[a + k] - self.params[b + k];
                            sum += d * d;
                            if let Some((scale, g)) = grad.as_mut() {
                                let v = *scale * norm * d;
                                g[a + k] += v;
                                g[b + k] -= v;
                            }
                        }
                    }
                }
            }
        }
        (sum, count)
    }
}

/// Canonical state moved to time `t`: `mean + d_mean`,
/// `normalize(rotation + d_rotation)`, `log_scale + d_log_scale`.
pub fn apply_deformation<T: Real>(
    mean: &Vec3<T>,
    rotation: &Quat<T>,
    log_scale: &Vec3<T>,
    d: &Deformation<T>,
) -> Result<DeformedState<T>> {
    let mut q = [T::zero(); 4];
    for i in 0..4 {
        q[i] = rotation[i] + d.d_rotation[i];
    }
    let n = quat_norm(&q);
    if !(n.as_f64() >= 1e-8) {
        return Err(Error::DegenerateRotation(n.as_f64()));
    }
    Ok(DeformedState {
        mean: *mean + d.d_mean,
        rotation: q.map(|v| v / n),
        log_scale: *log_scale + d.d_log_scale,
    })
}

/// Deformed state of `prim` at time `t`.
pub fn deform_primitive<T: Real>(
    prim: &crate::scene::Gaussian<T>,
    field: &DeformationField<T>,
    t: T,
) -> Result<DeformedState<T>> {
    let d = field.query(&prim.mean, t);
    apply_deformation(&prim.mean, &prim.rotation, &prim.log_scale, &d)
}
