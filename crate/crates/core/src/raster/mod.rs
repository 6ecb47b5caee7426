//! Depth-sorted alpha blending of projected primitives.
//!
//! [`render`] is the tiled production path, [`render_backward`] its
//! analytic gradient, and [`render_oracle`] a per-pixel float64 reference
//! without tiling or thresholds.

mod backward;
mod forward;
mod oracle;
mod preprocess;

pub use backward::{render_backward, PixelGrads, RenderGradients};
pub use forward::{render, RenderState};
pub use oracle::render_oracle;
pub use preprocess::{preprocess, SortedSplatList, Splat};

use serde::{Deserialize, Serialize};

use crate::math::Real;

pub const TILE_SIZE: usize = 16;
/// Contributions with `alpha * G` below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Footprint cutoff used when thresholds are disabled.
pub const EXACT_CULL_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub color: bool,
    pub depth: bool,
    pub flow: bool,
    pub uncertainty: bool,
}

impl Channels {
    pub fn all() -> Self {
        Self { color: true, depth: true, flow: true, uncertainty: true }
    }

    pub fn color_only() -> Self {
        Self { color: true, depth: false, flow: false, uncertainty: false }
    }
}

impl Default for Channels {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub sh_degree: usize,
    /// Disables early termination and the minimum-contribution skip.
    pub exact: bool,
    pub channels: Channels,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3], sh_degree: 1, exact: false, channels: Channels::all() }
    }
}

impl RenderOptions {
    pub fn exact() -> Self {
        Self { exact: true, ..Self::default() }
    }

    pub(crate) fn cull_eps(&self) -> f64 {
        if self.exact {
            EXACT_CULL_EPS
        } else {
            MIN_ALPHA
        }
    }
}

/// Rendered maps, row-major. Channels that were not requested are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height`, interleaved RGB.
    pub color: Vec<T>,
    pub depth: Vec<T>,
    pub uncertainty: Vec<T>,
    /// `2 * width * height`, interleaved (dx, dy) in pixels.
    pub flow: Vec<T>,
    /// Accumulated opacity `sum_k w_k`.
    pub alpha: Vec<T>,
    /// Per input primitive, the sum of its blend weights over all pixels.
    pub contributions: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    pub(crate) fn empty(width: usize, height: usize, channels: &Channels, num_prims: usize) -> Self {
        let n = width * height;
        let sized = |on: bool, k: usize| if on { vec![T::zero(); k * n] } else { Vec::new() };
        Self {
            width,
            height,
            color: sized(channels.color, 3),
            depth: sized(channels.depth, 1),
            uncertainty: sized(channels.uncertainty, 1),
            flow: sized(channels.flow, 2),
            alpha: vec![T::zero(); n],
            contributions: vec![T::zero(); num_prims],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_color(&self, x: usize, y: usize) -> [T; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    pub fn cast<U: Real>(&self) -> RenderOutput<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
        RenderOutput {
            width: self.width,
            height: self.height,
            color: c(&self.color),
            depth: c(&self.depth),
            uncertainty: c(&self.uncertainty),
            flow: c(&self.flow),
            alpha: c(&self.alpha),
            contributions: c(&self.contributions),
        }
    }

    /// Largest absolute difference over every channel both outputs carry.
    pub fn max_abs_diff(&self, other: &RenderOutput<T>) -> f64 {
        let pairs = [
            (&self.color, &other.color),
            (&self.depth, &other.depth),
            (&self.uncertainty, &other.uncertainty),
            (&self.flow, &other.flow),
            (&self.alpha, &other.alpha),
        ];
        let mut worst: f64 = 0.0;
        for (a, b) in pairs {
            if a.is_empty() || b.is_empty() {
                continue;
            }
            for (x, y) in a.iter().zip(b.iter()) {
                let d = (x.as_f64() - y.as_f64()).abs();
                if !d.is_finite() {
                    return f64::INFINITY;
                }
                worst = worst.max(d);
            }
        }
        worst
    }
}
