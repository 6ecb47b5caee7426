use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use super::preprocess::{preprocess, SortedSplatList};
use super::{RenderOptions, RenderOutput, MIN_ALPHA, MIN_TRANSMITTANCE, TILE_SIZE};
use crate::deformation::DeformationField;
use crate::error::Result;
use crate::math::Real;
use crate::scene::{Camera, Gaussian};

/// Per-tile lists of positions into the sorted splat list, front to back.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build<T: Real>(list: &SortedSplatList<T>, width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        let half = 0.5;
        for (pos, s) in list.splats.iter().enumerate() {
            let (mx, my, r) = (s.mean[0].as_f64(), s.mean[1].as_f64(), s.radius.as_f64());
            // pixel i has its center at i + 0.5
            let x0 = (mx - r - half).ceil().max(0.0);
            let x1 = (mx + r - half).floor().min(width as f64 - 1.0);
            let y0 = (my - r - half).ceil().max(0.0);
            let y1 = (my + r - half).floor().min(height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
            let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self { tiles_x, tiles_y, lists }
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of tile `t`.
    pub fn rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct RenderState<T> {
    pub splats: SortedSplatList<T>,
    pub(crate) bins: TileBins,
    /// Per pixel, how many entries of its tile list were visited.
    pub(crate) visited: Vec<u32>,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) fingerprint: u64,
    pub(crate) options: RenderOptions,
    pub(crate) with_flow: bool,
}

pub(crate) fn fingerprint<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
) -> u64 {
    let mut h = DefaultHasher::new();
    prims.len().hash(&mut h);
    for p in prims {
        for v in p.params() {
            v.as_f64().to_bits().hash(&mut h);
        }
        p.uncertainty.as_f64().to_bits().hash(&mut h);
    }
    if let Some(f) = field {
        for v in &f.params {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    for c in std::iter::once(cam).chain(flow_cam) {
        for row in c.matrix() {
            for v in row {
                v.to_bits().hash(&mut h);
            }
        }
        for v in [c.fx, c.fy, c.cx, c.cy, c.time] {
            v.as_f64().to_bits().hash(&mut h);
        }
        (c.width, c.height).hash(&mut h);
    }
    h.finish()
}

struct TileOut<T> {
    color: Vec<T>,
    depth: Vec<T>,
    uncertainty: Vec<T>,
    flow: Vec<T>,
    alpha: Vec<T>,
    visited: Vec<u32>,
    contrib: Vec<T>,
}

fn render_tile<T: Real>(
    tile: usize,
    list: &SortedSplatList<T>,
    bins: &TileBins,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> TileOut<T> {
    let (x0, y0, x1, y1) = bins.rect(tile, width, height);
    let n = (x1 - x0) * (y1 - y0);
    let ch = &opts.channels;
    let entries = &bins.lists[tile];
    let mut out = TileOut {
        color: vec![T::zero(); if ch.color { 3 * n } else { 0 }],
        depth: vec![T::zero(); if ch.depth { n } else { 0 }],
        uncertainty: vec![T::zero(); if ch.uncertainty { n } else { 0 }],
        flow: vec![T::zero(); if ch.flow { 2 * n } else { 0 }],
        alpha: vec![T::zero(); n],
        visited: vec![0; n],
        contrib: vec![T::zero(); entries.len()],
    };
    let min_alpha = T::of(MIN_ALPHA);
    let min_t = T::of(MIN_TRANSMITTANCE);
    let bg = opts.background.map(T::of);
    let one = T::one();
    let mut i = 0;
    for y in y0..y1 {
        let py = T::of(y as f64 + 0.5);
        for x in x0..x1 {
            let px = T::of(x as f64 + 0.5);
            let mut t = one;
            let mut acc = [T::zero(); 3];
            let mut depth = T::zero();
            let mut unc = T::zero();
            let mut flow = [T::zero(); 2];
            let mut alpha = T::zero();
            let mut visited = entries.len();
            for (li, &pos) in entries.iter().enumerate() {
                let s = &list.splats[pos as usize];
                let (a, _) = s.alpha_at(px, py);
                if !opts.exact && a < min_alpha {
                    continue;
                }
                let w = t * a;
                if ch.color {
                    for c in 0..3 {
                        acc[c] += w * s.color[c];
                    }
                }
                depth += w * s.depth;
                unc += w * s.uncertainty;
                flow[0] += w * s.flow[0];
                flow[1] += w * s.flow[1];
                alpha += w;
                out.contrib[li] += w;
                t *= one - a;
                if !opts.exact && t < min_t {
                    visited = li + 1;
                    break;
                }
            }
            out.alpha[i] = alpha;
            out.visited[i] = visited as u32;
            if ch.color {
                for c in 0..3 {
                    out.color[3 * i + c] = acc[c] + (one - alpha) * bg[c];
                }
            }
            if ch.depth {
                out.depth[i] = depth;
            }
            if ch.uncertainty {
                out.uncertainty[i] = unc;
            }
            if ch.flow {
                out.flow[2 * i] = flow[0];
                out.flow[2 * i + 1] = flow[1];
            }
            i += 1;
        }
    }
    out
}

/// Tiled forward pass. `flow_cam` selects the second frame `(camera, time)`
/// of the flow channel; without it the flow map is zero.
pub fn render<T: Real>(
    prims: &[Gaussian<T>],
    field: Option<&DeformationField<T>>,
    cam: &Camera<T>,
    flow_cam: Option<&Camera<T>>,
    opts: &RenderOptions,
) -> Result<(RenderOutput<T>, RenderState<T>)> {
    let list = preprocess(prims, field, cam, flow_cam, opts)?;
    let (w, h) = (cam.width, cam.height);
    let bins = TileBins::build(&list, w, h);
    let tiles: Vec<TileOut<T>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| render_tile(t, &list, &bins, w, h, opts))
        .collect();

    let mut out = RenderOutput::empty(w, h, &opts.channels, prims.len());
    let mut visited = vec![0u32; w * h];
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = bins.rect(t, w, h);
        let tw = x1 - x0;
        for y in y0..y1 {
            let src = (y - y0) * tw;
            let dst = y * w + x0;
            out.alpha[dst..dst + tw].copy_from_slice(&tile.alpha[src..src + tw]);
            visited[dst..dst + tw].copy_from_slice(&tile.visited[src..src + tw]);
            if opts.channels.color {
                out.color[3 * dst..3 * (dst + tw)].copy_from_slice(&tile.color[3 * src..3 * (src + tw)]);
            }
            if opts.channels.depth {
                out.depth[dst..dst + tw].copy_from_slice(&tile.depth[src..src + tw]);
            }
            if opts.channels.uncertainty {
                out.uncertainty[dst..dst + tw].copy_from_slice(&tile.uncertainty[src..src + tw]);
            }
            if opts.channels.flow {
                out.flow[2 * dst..2 * (dst + tw)].copy_from_slice(&tile.flow[2 * src..2 * (src + tw)]);
            }
        }
        for (li, &pos) in bins.lists[t].iter().enumerate() {
            let c = tile.contrib[li];
            if c != T::zero() {
                out.contributions[list.splats[pos as usize].index] += c;
            }
        }
    }

    let state = RenderState {
        splats: list,
        bins,
        visited,
        width: w,
        height: h,
        fingerprint: fingerprint(prims, field, cam, flow_cam),
        options: opts.clone(),
        with_flow: flow_cam.is_some() && opts.channels.flow,
    };
    Ok((out, state))
}
