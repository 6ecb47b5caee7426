//! Image-quality metrics and held-out evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::dataio::formats::{write_png, Image};
use crate::dataio::scene::Frame;
use crate::error::{Error, Result};
use crate::losses::{ssim_maps, SSIM_WINDOW};
use crate::trainer::Model;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB of RGB images with values in `[0, 1]`. With a per-pixel mask
/// only masked pixels count; an empty mask gives `None`.
pub fn psnr(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!("psnr of {} and {} values", a.len(), b.len())));
    }
    if let Some(m) = mask {
        if 3 * m.len() != a.len() {
            return Err(Error::ShapeMismatch("psnr mask size differs from the images".into()));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if mask.map_or(true, |m| m[i / 3]) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mse = sum / n as f64;
    Ok(Some(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) }))
}

/// Mean SSIM of RGB images (11x11 Gaussian window, sigma 1.5), averaged per
/// channel then over channels. With a mask only windows lying entirely
/// inside it count; `None` when there is no such window.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, mask: Option<&[bool]>) -> Result<Option<f64>> {
    if let Some(m) = mask {
        if m.len() != w * h {
            return Err(Error::ShapeMismatch("ssim mask size differs from the images".into()));
        }
    }
    let (maps, _) = ssim_maps(a, b, w, h, 3, false)?;
    let (ow, oh) = (maps.out_width, maps.out_height);
    let inside: Vec<bool> = match mask {
        None => vec![true; ow * oh],
        Some(m) => {
            // summed-area table of mask pixels
            let mut sat = vec![0u32; (w + 1) * (h + 1)];
            for y in 0..h {
                for x in 0..w {
                    sat[(y + 1) * (w + 1) + x + 1] = m[y * w + x] as u32 + sat[y * (w + 1) + x + 1]
                        + sat[(y + 1) * (w + 1) + x]
                        - sat[y * (w + 1) + x];
                }
            }
            let k = SSIM_WINDOW;
            (0..oh)
                .flat_map(|y| (0..ow).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let s = sat[(y + k) * (w + 1) + x + k] + sat[y * (w + 1) + x]
                        - sat[y * (w + 1) + x + k]
                        - sat[(y + k) * (w + 1) + x];
                    s as usize == k * k
                })
                .collect()
        }
    };
    let count = inside.iter().filter(|v| **v).count();
    if count == 0 {
        return Ok(None);
    }
    let per_channel: Vec<f64> = maps
        .maps
        .iter()
        .map(|m| m.iter().zip(&inside).filter(|(_, on)| **on).map(|(v, _)| v).sum::<f64>() / count as f64)
        .collect();
    Ok(Some(per_channel.iter().sum::<f64>() / 3.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub psnr: f64,
    pub mpsnr: Option<f64>,
    pub ssim: f64,
    pub mssim: Option<f64>,
}

/// Metrics of one frame; the masked ones use the covisibility mask and are
/// absent without one.
pub fn frame_metrics(rendered: &Image, frame: &Frame) -> Result<FrameMetrics> {
    let (w, h) = (frame.image.width, frame.image.height);
    if rendered.width != w || rendered.height != h {
        return Err(Error::ShapeMismatch(format!("frame {}: render size differs from the image", frame.id)));
    }
    let (a, b) = (&rendered.data, &frame.image.data);
    let mask = frame.covisibility.as_deref();
    Ok(FrameMetrics {
        frame_id: frame.id.clone(),
        psnr: psnr(a, b, None)?.expect("unmasked psnr"),
        mpsnr: mask.map(|m| psnr(a, b, Some(m))).transpose()?.flatten(),
        ssim: ssim(a, b, w, h, None)?.unwrap_or(f64::NAN),
        mssim: mask.map(|m| ssim(a, b, w, h, Some(m))).transpose()?.flatten(),
    })
}

/// Renders every frame, scores it, and writes per-pixel absolute
/// differences to `diff_dir/<frame_id>.png` when a directory is given.
pub fn evaluate(model: &Model, frames: &[Frame], diff_dir: Option<&Path>) -> Result<Vec<FrameMetrics>> {
    if let Some(d) = diff_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    frames
        .par_iter()
        .map(|f| {
            let img = model.render_image(&f.camera)?;
            if let Some(d) = diff_dir {
                let diff: Vec<f64> = img.data.iter().zip(&f.image.data).map(|(a, b)| (a - b).abs()).collect();
                write_png(&d.join(format!("{}.png", f.id)), &Image::new(img.width, img.height, diff)?)?;
            }
            frame_metrics(&img, f)
        })
        .collect()
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// CSV with one row per frame followed by a `mean` row; absent values are
/// empty cells.
pub fn metrics_csv(rows: &[FrameMetrics]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("frame_id,psnr,mpsnr,ssim,mssim\n");
    let mut line = |id: &str, p, mp, s, ms| out.push_str(&format!("{id},{},{},{},{}\n", cell(p), cell(mp), cell(s), cell(ms)));
    for r in rows {
        line(&r.frame_id, Some(r.psnr), r.mpsnr, Some(r.ssim).filter(|v| v.is_finite()), r.mssim);
    }
    line(
        "mean",
        mean_of(rows.iter().map(|r| Some(r.psnr))),
        mean_of(rows.iter().map(|r| r.mpsnr)),
        mean_of(rows.iter().map(|r| Some(r.ssim).filter(|v| v.is_finite()))),
        mean_of(rows.iter().map(|r| r.mssim)),
    );
    out
}
