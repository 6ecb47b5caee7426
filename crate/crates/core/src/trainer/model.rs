//! Trainable scene state and its single-file checkpoint container.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::dataio::formats::{Image, PointCloud};
use crate::deformation::{DeformationField, FieldConfig};
use crate::densify::knn_scale;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::{render, Channels, RenderOptions, RenderOutput, RenderState};
use crate::scene::{Camera, Gaussian};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UAGS";
pub const CHECKPOINT_VERSION: u32 = 1;
const PRIM_FLOATS: usize = Gaussian::<f32>::NUM_PARAMS + 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub prims: Vec<Gaussian<f32>>,
    pub field: Option<DeformationField<f32>>,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl Model {
    pub fn options(&self, channels: Channels) -> RenderOptions {
        RenderOptions { background: self.background, sh_degree: self.sh_degree, exact: false, channels }
    }

    pub fn render(
        &self,
        cam: &Camera<f64>,
        flow_cam: Option<&Camera<f64>>,
        channels: Channels,
    ) -> Result<(RenderOutput<f32>, RenderState<f32>)> {
        let flow_cam = flow_cam.map(|c| c.cast::<f32>());
        render(&self.prims, self.field.as_ref(), &cam.cast(), flow_cam.as_ref(), &self.options(channels))
    }

    /// Color render clamped to `[0, 1]`.
    pub fn render_image(&self, cam: &Camera<f64>) -> Result<Image> {
        let (out, _) = self.render(cam, None, Channels::color_only())?;
        Image::new(cam.width, cam.height, out.color.iter().map(|v| (*v as f64).clamp(0.0, 1.0)).collect())
    }
}

/// Isotropic primitives at the cloud's points, sized by the mean distance
/// to their three nearest neighbors.
pub fn primitives_from_cloud(cloud: &PointCloud, opacity: f64) -> Vec<Gaussian<f32>> {
    let pts: Vec<Vec3<f64>> = cloud.positions.iter().map(|p| Vec3(p.map(|v| v as f64))).collect();
    let scales = knn_scale(&pts, 0.01);
    pts.iter()
        .zip(&cloud.colors)
        .zip(scales)
        .map(|((p, c), s)| Gaussian::from_point(*p, c.map(|v| v as f64 / 255.0), s, opacity).cast())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// The field starts updating after warmup and counts its own steps.
    pub field_step: u64,
    /// Flattened per primitive in parameter order.
    pub prims: AdamState<f32>,
    pub field: AdamState<f32>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            step: 0,
            field_step: 0,
            prims: AdamState::zeros(model.prims.len() * Gaussian::<f32>::NUM_PARAMS),
            field: AdamState::zeros(model.field.as_ref().map_or(0, |f| f.params.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    iteration: u64,
    sh_degree: usize,
    background: [f64; 3],
    primitives: u64,
    field: Option<FieldConfig>,
    optimizer: bool,
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    for x in v {
        w.write_f32::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_floats(r: &mut Cursor<&[u8]>, n: usize) -> std::result::Result<Vec<f32>, String> {
    let left = r.get_ref().len() - r.position() as usize;
    if n.saturating_mul(4) > left {
        return Err("truncated checkpoint body".into());
    }
    let mut v = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut v).map_err(|e| format!("truncated checkpoint: {e}"))?;
    Ok(v)
}

impl Checkpoint {
    /// Magic, `u32` version, a length-prefixed JSON header, then
    /// little-endian `f32` arrays: primitives (parameters, contribution,
    /// uncertainty), field parameters, and optimizer moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let header = Header {
            iteration: self.iteration,
            sh_degree: m.sh_degree,
            background: m.background,
            primitives: m.prims.len() as u64,
            field: m.field.as_ref().map(|f| f.config.clone()),
            optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        let w = &mut out;
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        w.write_u32::<LittleEndian>(json.len() as u32).unwrap();
        w.extend_from_slice(&json);
        for p in &m.prims {
            write_f32s(w, &p.params()).unwrap();
            write_f32s(w, &[p.contribution, p.uncertainty]).unwrap();
        }
        if let Some(f) = &m.field {
            write_f32s(w, &f.params).unwrap();
        }
        if let Some(o) = &self.optimizer {
            w.write_u64::<LittleEndian>(o.step).unwrap();
            w.write_u64::<LittleEndian>(o.field_step).unwrap();
            for a in [&o.prims.m, &o.prims.v, &o.field.m, &o.field.v] {
                write_f32s(w, a).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "file too short".to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let trunc = |e: std::io::Error| format!("truncated checkpoint: {e}");
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let start = r.position() as usize;
        let json = bytes.get(start..start + len).ok_or("truncated checkpoint header")?;
        let h: Header = serde_json::from_slice(json).map_err(|e| format!("bad checkpoint header: {e}"))?;
        r.set_position((start + len) as u64);
        let n = h.primitives as usize;
        let raw = read_floats(&mut r, n.saturating_mul(PRIM_FLOATS))?;
        let prims = raw
            .chunks_exact(PRIM_FLOATS)
            .map(|c| {
                let mut g = Gaussian::from_point(Vec3::zero(), [0.5; 3], 1.0, 0.5);
                g.set_params(c[..Gaussian::<f32>::NUM_PARAMS].try_into().unwrap());
                g.contribution = c[PRIM_FLOATS - 2];
                g.uncertainty = c[PRIM_FLOATS - 1];
                g
            })
            .collect::<Vec<_>>();
        let field = match h.field {
            Some(cfg) => {
                let len = crate::deformation::Layout::new(&cfg).len;
                Some(DeformationField::from_params(cfg, read_floats(&mut r, len)?).map_err(|e| e.to_string())?)
            }
            None => None,
        };
        let model = Model { prims, field, sh_degree: h.sh_degree, background: h.background };
        let optimizer = if h.optimizer {
            let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
            let field_step = r.read_u64::<LittleEndian>().map_err(trunc)?;
            let np = n * Gaussian::<f32>::NUM_PARAMS;
            let nf = model.field.as_ref().map_or(0, |f| f.params.len());
            let (pm, pv, fm, fv) = (read_floats(&mut r, np)?, read_floats(&mut r, np)?, read_floats(&mut r, nf)?, read_floats(&mut r, nf)?);
            Some(OptimizerState { step, field_step, prims: AdamState { m: pm, v: pv }, field: AdamState { m: fm, v: fv } })
        } else {
            None
        };
        if (r.position() as usize) != bytes.len() {
            return Err("trailing bytes after checkpoint body".into());
        }
        Ok(Checkpoint { iteration: h.iteration, model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::load(path, e))
    }
}
