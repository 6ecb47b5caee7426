//! PNG, PFM, Middlebury `.flo` and binary PLY codecs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Magic number at the start of a `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// RGB image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = quantize8(*v) as f64 / 255.0;
        }
        self
    }
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::load(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image { width: w as usize, height: h as usize, data })
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|v| quantize8(*v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::ShapeMismatch("image buffer does not match its size".into()))?;
    save(path, image::DynamicImage::ImageRgb8(buf))
}

/// Grayscale PNG with 16 bits per pixel, values clamped to `[0, 1]`.
pub fn write_png16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let raw: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::ShapeMismatch("image buffer does not match its size".into()))?;
    save(path, image::DynamicImage::ImageLuma16(buf))
}

/// Binary mask; any non-zero gray level is `true`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|v| v > 0).collect()))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let raw = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::ShapeMismatch("mask does not match its size".into()))?;
    save(path, image::DynamicImage::ImageLuma8(buf))
}

fn save(path: &Path, img: image::DynamicImage) -> Result<()> {
    let mut w = create(path)?;
    img.write_to(&mut w, image::ImageFormat::Png).map_err(|e| Error::load(path, e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn header_line(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut s = String::new();
    r.read_line(&mut s).map_err(|e| Error::load(path, e.to_string()))?;
    if s.is_empty() {
        return Err(Error::load(path, "truncated header"));
    }
    Ok(s.trim().to_string())
}

/// Single-channel PFM. Rows are stored bottom to top, as the format
/// prescribes; the returned buffer is top to bottom.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = open(path)?;
    let magic = header_line(&mut r, path)?;
    if magic != "Pf" {
        return Err(Error::load(path, format!("expected single-channel PFM magic `Pf`, found `{magic}`")));
    }
    let dims = header_line(&mut r, path)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::load(path, format!("bad PFM dimensions `{dims}`"))),
    };
    let scale: f64 = header_line(&mut r, path)?
        .parse()
        .map_err(|_| Error::load(path, "bad PFM scale"))?;
    let mut data = vec![0f32; w * h];
    for row in (0..h).rev() {
        let line = &mut data[row * w..(row + 1) * w];
        let res = if scale < 0.0 {
            r.read_f32_into::<LittleEndian>(line)
        } else {
            r.read_f32_into::<BigEndian>(line)
        };
        res.map_err(|e| Error::load(path, format!("truncated PFM data: {e}")))?;
    }
    Ok((w, h, data))
}

pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!("PFM {width}x{height} needs {} values", width * height)));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "Pf\n{width} {height}\n-1.0\n").map_err(io)?;
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            w.write_f32::<LittleEndian>(*v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Middlebury flow: interleaved `(u, v)` per pixel, row-major.
pub fn read_flo(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = open(path)?;
    let bad = |e: std::io::Error| Error::load(path, format!("truncated .flo file: {e}"));
    let magic = r.read_f32::<LittleEndian>().map_err(bad)?;
    if magic != FLO_MAGIC {
        return Err(Error::load(path, format!("bad .flo magic {magic}")));
    }
    let w = r.read_i32::<LittleEndian>().map_err(bad)?;
    let h = r.read_i32::<LittleEndian>().map_err(bad)?;
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::load(path, format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 2 * w * h];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
    Ok((w, h, data))
}

pub fn write_flo(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != 2 * width * height {
        return Err(Error::ShapeMismatch(format!("flow {width}x{height} needs {} values", 2 * width * height)));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io)?;
    w.write_i32::<LittleEndian>(width as i32).map_err(io)?;
    w.write_i32::<LittleEndian>(height as i32).map_err(io)?;
    for v in data {
        w.write_f32::<LittleEndian>(*v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Colored point cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Self::I8 => r.read_i8()? as f64,
            Self::U8 => r.read_u8()? as f64,
            Self::I16 => r.read_i16::<LittleEndian>()? as f64,
            Self::U16 => r.read_u16::<LittleEndian>()? as f64,
            Self::I32 => r.read_i32::<LittleEndian>()? as f64,
            Self::U32 => r.read_u32::<LittleEndian>()? as f64,
            Self::F32 => r.read_f32::<LittleEndian>()? as f64,
            Self::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

/// Reads the vertex element of a binary little-endian PLY. Properties other
/// than `x y z red green blue` are skipped; missing colors read as gray.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut r = open(path)?;
    if header_line(&mut r, path)? != "ply" {
        return Err(Error::load(path, "missing `ply` magic"));
    }
    let mut format_ok = false;
    let mut vertices = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    let mut other_first = false;
    loop {
        let line = header_line(&mut r, path)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, _] => {
                return Err(Error::load(path, format!("unsupported PLY format `{other}`")));
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                other_first |= !in_vertex && vertices.is_none();
                if in_vertex {
                    if vertices.is_some() {
                        return Err(Error::load(path, "duplicate vertex element"));
                    }
                    if other_first {
                        return Err(Error::load(path, "vertex element must come first"));
                    }
                    vertices = Some(n.parse::<usize>().map_err(|_| Error::load(path, "bad vertex count"))?);
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::load(path, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let ty = PlyType::parse(ty).ok_or_else(|| Error::load(path, format!("unknown PLY type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::load(path, "PLY must be binary_little_endian"));
    }
    let n = vertices.ok_or_else(|| Error::load(path, "no vertex element"))?;
    let slot = |name: &str| props.iter().position(|(p, _)| p == name);
    let (xi, yi, zi) = match (slot("x"), slot("y"), slot("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::load(path, "vertex element lacks x, y or z")),
    };
    let color = [slot("red"), slot("green"), slot("blue")];
    let mut cloud = PointCloud { positions: Vec::with_capacity(n), colors: Vec::with_capacity(n) };
    let mut vals = vec![0.0; props.len()];
    for _ in 0..n {
        for (v, (_, ty)) in vals.iter_mut().zip(&props) {
            *v = ty.read(&mut r).map_err(|e| Error::load(path, format!("truncated PLY body: {e}")))?;
        }
        cloud.positions.push([vals[xi] as f32, vals[yi] as f32, vals[zi] as f32]);
        cloud.colors.push(color.map(|c| c.map_or(128, |i| vals[i].clamp(0.0, 255.0) as u8)));
    }
    Ok(cloud)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.positions.len() != cloud.colors.len() {
        return Err(Error::ShapeMismatch("point cloud positions and colors differ in length".into()));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p {
            w.write_f32::<LittleEndian>(*v).map_err(io)?;
        }
        w.write_all(c).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.png");
        let img = Image::new(5, 3, (0..45).map(|i| i as f64 / 44.0).collect()).unwrap().quantized();
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
        let mask: Vec<bool> = (0..15).map(|i| i % 3 == 0).collect();
        write_mask(&dir.path().join("m.png"), 5, 3, &mask).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), (5, 3, mask));
    }

    #[test]
    fn png16_keeps_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.png");
        write_png16(&p, 2, 1, &[0.25, 1.0]).unwrap();
        let img = image::open(&p).unwrap().to_luma16();
        assert_eq!(img.into_raw(), vec![16384, 65535]);
    }

    #[test]
    fn pfm_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let data: Vec<f32> = (0..6).map(|i| i as f32 * 0.5).collect();
        write_pfm(&p, 3, 2, &data).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let body = &bytes[bytes.len() - 24..];
        // first stored row is the bottom image row
        assert_eq!(f32::from_le_bytes(body[0..4].try_into().unwrap()), 1.5);
        assert_eq!(read_pfm(&p).unwrap(), (3, 2, data));
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_be_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), (2, 1, vec![2.5, -1.0]));
    }

    #[test]
    fn flo_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        let data: Vec<f32> = (0..12).map(|i| i as f32 - 3.25).collect();
        write_flo(&p, 3, 2, &data).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 4 * 12);
        assert_eq!(read_flo(&p).unwrap(), (3, 2, data));
        std::fs::write(&p, [0u8; 16]).unwrap();
        assert!(matches!(read_flo(&p), Err(Error::Load { .. })));
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.ply");
        let cloud = PointCloud {
            positions: vec![[0.5, -1.0, 2.25], [1e-3, 7.0, -3.5]],
            colors: vec![[255, 0, 17], [1, 2, 3]],
        };
        write_ply(&p, &cloud).unwrap();
        assert_eq!(read_ply(&p).unwrap(), cloud);
    }

    #[test]
    fn ply_with_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("extra.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\n\
            property double x\nproperty double y\nproperty double z\nproperty float nx\n\
            property uchar red\nproperty uchar green\nproperty uchar blue\n\
            element face 0\nproperty list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for v in [1.0f64, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&[9, 8, 7]);
        std::fs::write(&p, bytes).unwrap();
        let c = read_ply(&p).unwrap();
        assert_eq!(c.positions, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(c.colors, vec![[9, 8, 7]]);
    }

    #[test]
    fn ascii_ply_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        std::fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        let err = read_ply(&p).unwrap_err().to_string();
        assert!(err.contains("a.ply") && err.contains("ascii"), "{err}");
    }
}
