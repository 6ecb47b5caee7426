//! Image refiners and the cache of refined unseen views.
//!
//! External refiners are separate programs driven through a manifest file:
//! `{inputs: [png], output_dir, strength, prompt, seed}`. For each input
//! `<name>.png` the program writes `<output_dir>/<name>.refined.png`, then
//! a `DONE` marker; on failure it writes an `ERROR` marker holding a
//! message.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataio::formats::{read_png, write_png, Image};
use crate::error::{Error, Result};
use crate::scene::Camera;

pub trait Refiner: Send + Sync {
    fn name(&self) -> String;
    fn refine(&self, images: &[Image], seed: u64) -> Result<Vec<Image>>;
}

pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn name(&self) -> String {
        "identity".into()
    }

    fn refine(&self, images: &[Image], _seed: u64) -> Result<Vec<Image>> {
        Ok(images.to_vec())
    }
}

/// 5x5 box blur with clamped borders; a stand-in refiner for tests.
pub struct BlurRefiner;

impl Refiner for BlurRefiner {
    fn name(&self) -> String {
        "blur".into()
    }

    fn refine(&self, images: &[Image], _seed: u64) -> Result<Vec<Image>> {
        Ok(images.iter().map(box_blur5).collect())
    }
}

pub fn box_blur5(img: &Image) -> Image {
    let (w, h) = (img.width as isize, img.height as isize);
    let at = |x: isize, y: isize, c: usize| img.data[3 * (y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize + c];
    let mut data = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        s += at(x + dx, y + dy, c);
                    }
                }
                data[3 * (y * w + x) as usize + c] = s / 25.0;
            }
        }
    }
    Image { width: img.width, height: img.height, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerSettings {
    /// Noise strength passed to external refiners, in `[0, 1]`.
    pub strength: f64,
    pub prompt: String,
    pub timeout_secs: f64,
    /// Refine in a background thread and swap the cache when done.
    pub async_mode: bool,
}

impl Default for RefinerSettings {
    fn default() -> Self {
        Self { strength: 0.3, prompt: String::new(), timeout_secs: 600.0, async_mode: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineManifest {
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub strength: f64,
    pub prompt: String,
    pub seed: u64,
}

/// Runs `program args... <manifest.json>` in a fresh scratch directory.
pub struct ExternalRefiner {
    pub program: String,
    pub args: Vec<String>,
    pub strength: f64,
    pub prompt: String,
    pub timeout: Duration,
}

impl ExternalRefiner {
    /// `command` is split on whitespace into program and leading arguments.
    pub fn new(command: &str, settings: &RefinerSettings) -> Result<Self> {
        let mut parts = command.split_whitespace().map(String::from);
        let program = parts.next().ok_or_else(|| Error::InvalidParameter("empty refiner command".into()))?;
        if !(0.0..=1.0).contains(&settings.strength) {
            return Err(Error::InvalidParameter(format!("refiner strength {} outside [0, 1]", settings.strength)));
        }
        Ok(Self {
            program,
            args: parts.collect(),
            strength: settings.strength,
            prompt: settings.prompt.clone(),
            timeout: Duration::from_secs_f64(settings.timeout_secs.max(0.0)),
        })
    }

    fn run(&self, dir: &Path, images: &[Image], seed: u64) -> Result<Vec<Image>> {
        let input_dir = dir.join("inputs");
        let output_dir = dir.join("outputs");
        std::fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
        let mut inputs = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let p = input_dir.join(format!("view{i:04}.png"));
            write_png(&p, img)?;
            inputs.push(p);
        }
        let manifest = RefineManifest {
            inputs: inputs.clone(),
            output_dir: output_dir.clone(),
            strength: self.strength,
            prompt: self.prompt.clone(),
            seed,
        };
        let mpath = dir.join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| Error::io(&mpath, e))?;

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&mpath)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Refiner(format!("cannot start `{}`: {e}", self.program)))?;
        let start = Instant::now();
        let status = loop {
            if let Some(s) = child.try_wait().map_err(|e| Error::Refiner(e.to_string()))? {
                break s;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Refiner(format!("timed out after {:.1} s", self.timeout.as_secs_f64())));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let err_marker = output_dir.join("ERROR");
        if err_marker.exists() {
            let msg = std::fs::read_to_string(&err_marker).unwrap_or_default();
            return Err(Error::Refiner(format!("refiner reported an error: {}", msg.trim())));
        }
        if !status.success() {
            return Err(Error::Refiner(format!("refiner exited with {status}")));
        }
        if !output_dir.join("DONE").exists() {
            return Err(Error::Refiner("refiner exited without writing DONE".into()));
        }
        inputs
            .iter()
            .zip(images)
            .map(|(p, src)| {
                let stem = p.file_stem().unwrap().to_string_lossy();
                let out = read_png(&output_dir.join(format!("{stem}.refined.png")))?;
                if (out.width, out.height) != (src.width, src.height) {
                    return Err(Error::Refiner(format!("{stem}.refined.png changed the image size")));
                }
                Ok(out)
            })
            .collect()
    }
}

impl Refiner for ExternalRefiner {
    fn name(&self) -> String {
        self.program.clone()
    }

    fn refine(&self, images: &[Image], seed: u64) -> Result<Vec<Image>> {
        let dir = tempfile::Builder::new()
            .prefix("uags-refine-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        self.run(dir.path(), images, seed)
    }
}

/// `identity`, `blur`, or an external command line.
pub fn parse_refiner(spec: &str, settings: &RefinerSettings) -> Result<Box<dyn Refiner>> {
    Ok(match spec.trim() {
        "identity" => Box::new(IdentityRefiner),
        "blur" => Box::new(BlurRefiner),
        cmd => Box::new(ExternalRefiner::new(cmd, settings)?),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub camera: Camera<f64>,
    pub rendered: Image,
    pub refined: Image,
    pub iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinedCache {
    pub entries: Vec<CacheEntry>,
}

impl RefinedCache {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries whose refined image is the rendered image itself.
    pub fn identity(cameras: Vec<Camera<f64>>, rendered: Vec<Image>, iteration: usize) -> Self {
        let entries = cameras
            .into_iter()
            .zip(rendered)
            .map(|(camera, rendered)| CacheEntry { camera, refined: rendered.clone(), rendered, iteration })
            .collect();
        Self { entries }
    }

    /// Entries with refined images from a refiner; counts must match.
    pub fn refined(cameras: Vec<Camera<f64>>, rendered: Vec<Image>, refined: Vec<Image>, iteration: usize) -> Result<Self> {
        if refined.len() != rendered.len() {
            return Err(Error::Refiner(format!("{} images in, {} out", rendered.len(), refined.len())));
        }
        let entries = cameras
            .into_iter()
            .zip(rendered)
            .zip(refined)
            .map(|((camera, rendered), refined)| CacheEntry { camera, rendered, refined, iteration })
            .collect();
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, w: usize, h: usize) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..3 * w * h).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap().quantized()
    }

    #[test]
    fn identity_is_exact() {
        let a = vec![img(1, 5, 4), img(2, 5, 4)];
        assert_eq!(IdentityRefiner.refine(&a, 0).unwrap(), a);
    }

    #[test]
    fn blur_matches_reference_convolution() {
        let a = img(3, 7, 6);
        let b = box_blur5(&a);
        for y in 0..6i32 {
            for x in 0..7i32 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..5 {
                        for kx in 0..5 {
                            let sx = (x + kx - 2).max(0).min(6) as usize;
                            let sy = (y + ky - 2).max(0).min(5) as usize;
                            s += a.data[3 * (sy * 7 + sx) + c] / 25.0;
                        }
                    }
                    assert!((b.data[3 * (y as usize * 7 + x as usize) + c] - s).abs() < 1e-12);
                }
            }
        }
    }

    fn script(dir: &Path, body: &str) -> String {
        let p = dir.join("refiner.py");
        std::fs::write(&p, body).unwrap();
        format!("python3 {}", p.display())
    }

    const COPY: &str = r#"
import json, os, shutil, sys
m = json.load(open(sys.argv[1]))
for p in m["inputs"]:
    name = os.path.splitext(os.path.basename(p))[0]
    shutil.copy(p, os.path.join(m["output_dir"], name + ".refined.png"))
open(os.path.join(m["output_dir"], "DONE"), "w").close()
"#;

    fn settings(timeout: f64) -> RefinerSettings {
        RefinerSettings { timeout_secs: timeout, ..RefinerSettings::default() }
    }

    #[test]
    fn external_copy_refiner_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalRefiner::new(&script(dir.path(), COPY), &settings(30.0)).unwrap();
        let a = vec![img(4, 6, 5), img(5, 6, 5), img(6, 6, 5)];
        assert_eq!(r.refine(&a, 3).unwrap(), a);
    }

    #[test]
    fn external_error_marker_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"
import json, os, sys
m = json.load(open(sys.argv[1]))
open(os.path.join(m["output_dir"], "ERROR"), "w").write("weights not found")
sys.exit(1)
"#;
        let r = ExternalRefiner::new(&script(dir.path(), body), &settings(30.0)).unwrap();
        let err = r.refine(&[img(1, 4, 4)], 0).unwrap_err().to_string();
        assert!(err.contains("weights not found"), "{err}");
    }

    #[test]
    fn missing_done_marker_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalRefiner::new(&script(dir.path(), "pass\n"), &settings(30.0)).unwrap();
        assert!(r.refine(&[img(1, 4, 4)], 0).unwrap_err().to_string().contains("DONE"));
    }

    #[test]
    fn timeout_kills_the_refiner() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalRefiner::new(&script(dir.path(), "import time\ntime.sleep(30)\n"), &settings(0.3)).unwrap();
        let t = Instant::now();
        assert!(r.refine(&[img(1, 4, 4)], 0).unwrap_err().to_string().contains("timed out"));
        assert!(t.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn refiner_specs() {
        let s = RefinerSettings::default();
        assert_eq!(parse_refiner("identity", &s).unwrap().name(), "identity");
        assert_eq!(parse_refiner("blur", &s).unwrap().name(), "blur");
        assert_eq!(parse_refiner("python3 x.py", &s).unwrap().name(), "python3");
        assert!(parse_refiner("  ", &s).is_err());
    }
}
