//! Per-primitive uncertainty from accumulated blend weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::math::{sigmoid, Real};
use crate::raster::{render, Channels, RenderOptions};
use crate::scene::{Camera, Gaussian};

/// Sigmoid shift `c0` and slope `c1` of `U = 1 - sigmoid(c1 (C - c0))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub c0: f64,
    pub c1: f64,
}

impl UncertaintyParams {
    /// `c0 = 0.25`, `c1 = 20 / L` for `L` training images.
    pub fn for_views(num_views: usize) -> Self {
        Self { c0: 0.25, c1: 20.0 / num_views.max(1) as f64 }
    }
}

pub fn contribution_to_uncertainty(c: f64, c0: f64, c1: f64) -> f64 {
    1.0 - sigmoid(c1 * (c - c0))
}

/// `C_k`: the sum of each primitive's blend weights over every pixel of
/// every frame, each rendered at its own time.
pub fn accumulate_contributions<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    frames: &[Camera<T>],
    opts: &RenderOptions,
) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::InvalidParameter("contribution pass needs at least one frame".into()));
    }
    let opts = RenderOptions {
        channels: Channels { color: false, depth: false, flow: false, uncertainty: false },
        ..opts.clone()
    };
    let per_frame: Vec<Vec<T>> = frames
        .par_iter()
        .map(|cam| render(prims, field, cam, None, &opts).map(|(out, _)| out.contributions))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; prims.len()];
    for c in &per_frame {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v.as_f64();
        }
    }
    Ok(total)
}

/// Recomputes `contribution` and `uncertainty` of every primitive.
pub fn refresh_uncertainty<T: Real>(
    prims: &mut [Gaussian<T>],
    field: Option<&DeformationField<T>>,
    frames: &[Camera<T>],
    params: UncertaintyParams,
    opts: &RenderOptions,
) -> Result<()> {
    if !(params.c1 > 0.0) {
        return Err(Error::InvalidParameter(format!("uncertainty slope must be positive, got {}", params.c1)));
    }
    let c = accumulate_contributions(prims, field, frames, opts)?;
    for (p, c) in prims.iter_mut().zip(c) {
        p.contribution = T::of(c);
        p.uncertainty = T::of(contribution_to_uncertainty(c, params.c0, params.c1));
    }
    Ok(())
}
