//! Raster and CSV plumbing plus the synthetic segmentation dataset.
//!
//! Interchange format is binary PGM (P5, maxval 255). A dataset directory
//! holds `images/*.pgm` and `masks/*.pgm` matched by filename stem. All file
//! writes go through a temp-file-and-rename so readers never see a torn file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::objsize::MaskImage;
use crate::tensor::{Shape, TensorData};

// ── rasters ──────────────────────────────────────────────────────────

/// An 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::BadOperand {
                op: "Raster::new",
                msg: format!("pixel buffer length {} != {width}x{height}", pixels.len()),
            });
        }
        Ok(Raster {
            width,
            height,
            pixels,
        })
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, raster: &Raster) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    bytes.extend_from_slice(&raster.pixels);
    atomic_write(path, &bytes)
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderScanner<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::RasterFormat {
            path: self.path.to_path_buf(),
            msg: msg.into(),
            offset: self.pos,
        }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos >= self.bytes.len() {
                return Err(self.err("unexpected end of header"));
            }
            if self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            let start = self.pos;
            while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            return Ok(&self.bytes[start..self.pos]);
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| self.err(format!("{what} is not a decimal integer")))
    }
}

/// Read a binary PGM (P5, maxval <= 255). Larger maxvals (16-bit payloads)
/// are rejected explicitly.
pub fn read_pgm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut sc = HeaderScanner {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = sc.token()?;
    if magic != b"P5" {
        return Err(sc.err(format!(
            "bad magic `{}` (only binary P5 is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = sc.number("width")?;
    let height = sc.number("height")?;
    let maxval = sc.number("maxval")?;
    if maxval > 255 {
        return Err(sc.err(format!("maxval {maxval}: 16-bit PGM is not supported")));
    }
    if maxval == 0 {
        return Err(sc.err("maxval must be positive"));
    }
    // Exactly one whitespace byte separates header from payload.
    if sc.pos >= bytes.len() || !bytes[sc.pos].is_ascii_whitespace() {
        return Err(sc.err("missing whitespace after maxval"));
    }
    sc.pos += 1;
    let expected = width * height;
    let payload = &bytes[sc.pos..];
    if payload.len() < expected {
        return Err(Error::RasterFormat {
            path: path.to_path_buf(),
            msg: format!(
                "truncated pixel payload: expected {expected} bytes, found {}",
                payload.len()
            ),
            offset: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::RasterFormat {
            path: path.to_path_buf(),
            msg: format!(
                "trailing bytes after pixel payload: expected {expected}, found {}",
                payload.len()
            ),
            offset: sc.pos + expected,
        });
    }
    Raster::new(width, height, payload.to_vec())
}

// ── dataset loading ──────────────────────────────────────────────────

/// Image + mask pair. The image is a (1, C, H, W) tensor in [0, 1].
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    pub image: TensorData,
    pub mask: MaskImage,
}

impl SegSample {
    pub fn from_rasters(id: String, image: &Raster, mask: MaskImage) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::ShapeMismatch {
                op: "SegSample",
                axis: "mask width",
                expected: image.width,
                got: mask.width,
            });
        }
        let shape = Shape::new(1, 1, image.height, image.width);
        let data: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Ok(SegSample {
            id,
            image: TensorData::from_vec(shape, data)?,
            mask,
        })
    }
}

fn pgm_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "pgm").unwrap_or(false) {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Read every `*.pgm` in a directory as a mask, sorted by filename stem.
pub fn read_mask_dir(dir: &Path) -> Result<Vec<MaskImage>> {
    pgm_stems(dir)?
        .into_iter()
        .map(|(_, path)| {
            let r = read_pgm(&path)?;
            MaskImage::new(r.width, r.height, r.pixels)
        })
        .collect()
}

/// Load an `images/` + `masks/` directory pair matched by filename stem.
/// Stems present on only one side are an error.
pub fn read_dataset(root: &Path) -> Result<Vec<SegSample>> {
    let images = pgm_stems(&root.join("images"))?;
    let masks = pgm_stems(&root.join("masks"))?;
    let mask_map: std::collections::BTreeMap<_, _> = masks.into_iter().collect();
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in images {
        let mask_path = mask_map.get(&stem).ok_or_else(|| Error::BadOperand {
            op: "read_dataset",
            msg: format!("image `{stem}` has no matching mask"),
        })?;
        let img = read_pgm(&img_path)?;
        let mask_raster = read_pgm(mask_path)?;
        let mask = MaskImage::new(mask_raster.width, mask_raster.height, mask_raster.pixels)?;
        out.push(SegSample::from_rasters(stem, &img, mask)?);
    }
    Ok(out)
}

/// Reflect-pad an image/mask pair on the right and bottom so both spatial
/// dims are multiples of `factor`. Returns the original size for cropping.
pub fn pad_to_multiple(sample: &SegSample, factor: usize) -> (SegSample, (usize, usize)) {
    let (h, w) = (sample.image.shape.h, sample.image.shape.w);
    let orig = (h, w);
    let nh = h.div_ceil(factor) * factor;
    let nw = w.div_ceil(factor) * factor;
    if nh == h && nw == w {
        return (sample.clone(), orig);
    }
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            // reflect about the last sample: n, n+1, .. → n-2, n-3, ..
            n - 2 - (i - n).min(n - 2)
        }
    };
    let c = sample.image.shape.c;
    let mut img = TensorData::zeros(Shape::new(1, c, nh, nw));
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                let v = sample.image.get(0, ch, reflect(y, h), reflect(x, w));
                img.set(0, ch, y, x, v);
            }
        }
    }
    let mut mask = MaskImage::filled(nw, nh, 0);
    for y in 0..nh {
        for x in 0..nw {
            mask.set(x, y, sample.mask.get(reflect(x, w), reflect(y, h)));
        }
    }
    (
        SegSample {
            id: sample.id.clone(),
            image: img,
            mask,
        },
        orig,
    )
}

// ── CSV ──────────────────────────────────────────────────────────────

/// Comma-separated, `\n` line ends, header row mandatory.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, csv_string(header, rows).as_bytes())
}

// ── synthetic data ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Ellipse,
    Blob,
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Square image side H = W.
    pub size: usize,
    pub kinds: Vec<ShapeKind>,
    pub radius_min: f64,
    pub radius_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn blobs(count: usize, size: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            size,
            kinds: vec![ShapeKind::Blob],
            radius_min: 6.0,
            radius_max: 14.0,
            objects_min: 1,
            objects_max: 3,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Placement reserves a 1.4·r halo so blob lobes stay inside the frame.
        if self.radius_max * 1.4 + 1.0 >= self.size as f64 / 2.0 {
            return Err(Error::BadOperand {
                op: "SyntheticConfig",
                msg: format!(
                    "radius_max {} leaves no placement room on a {} px image",
                    self.radius_max, self.size
                ),
            });
        }
        if self.radius_min <= 1.5 || self.radius_min > self.radius_max {
            return Err(Error::BadOperand {
                op: "SyntheticConfig",
                msg: "need 1.5 < radius_min <= radius_max".into(),
            });
        }
        if self.kinds.is_empty() {
            return Err(Error::BadOperand {
                op: "SyntheticConfig",
                msg: "need at least one shape kind".into(),
            });
        }
        Ok(())
    }
}

struct ShapeDraw {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// cos/sin amplitude pairs modulating the radius for blobs.
    harmonics: Vec<(f64, f64)>,
    brightness: f64,
}

impl ShapeDraw {
    /// Signed containment: <= 1 inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let base = ((dx / self.rx).powi(2) + (dy / self.ry).powi(2)).sqrt();
        if self.harmonics.is_empty() {
            return base;
        }
        let theta = dy.atan2(dx);
        let mut mod_r = 1.0;
        for (k, (a, phase)) in self.harmonics.iter().enumerate() {
            mod_r += a * ((k as f64 + 2.0) * theta + phase).cos();
        }
        base / mod_r.max(0.3)
    }
}

/// Deterministic synthetic grayscale segmentation set: smooth background,
/// shaded foreground shapes, Gaussian pixel noise; masks are the exact
/// shape rasters. The first shape of every image is re-drawn until its
/// raster has at least `DEFAULT_MIN_AREA` pixels.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SegSample>> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let n = config.size;
    let mut out = Vec::with_capacity(config.count);
    for idx in 0..config.count {
        let (image, mask) = generate_one(config, &mut rng)?;
        let shape = Shape::new(1, 1, n, n);
        out.push(SegSample {
            id: format!("synth{idx:05}"),
            image: TensorData::from_vec(shape, image)?,
            mask,
        });
    }
    Ok(out)
}

fn draw_shape(config: &SyntheticConfig, rng: &mut ChaCha12Rng) -> ShapeDraw {
    let n = config.size as f64;
    let kind = config.kinds[rng.gen_range(0..config.kinds.len())];
    let r = rng.gen_range(config.radius_min..=config.radius_max);
    let (rx, ry) = match kind {
        ShapeKind::Disc => (r, r),
        ShapeKind::Ellipse | ShapeKind::Blob => {
            let e: f64 = rng.gen_range(0.6..1.0);
            (r / e.sqrt(), r * e.sqrt())
        }
    };
    let margin = rx.max(ry) * 1.4 + 1.0;
    let cx = rng.gen_range(margin..n - margin);
    let cy = rng.gen_range(margin..n - margin);
    let harmonics = match kind {
        ShapeKind::Blob => (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..0.18),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect(),
        _ => Vec::new(),
    };
    ShapeDraw {
        cx,
        cy,
        rx,
        ry,
        harmonics,
        brightness: rng.gen_range(0.10..0.25),
    }
}

fn generate_one(config: &SyntheticConfig, rng: &mut ChaCha12Rng) -> Result<(Vec<f64>, MaskImage)> {
    let n = config.size;
    let nf = n as f64;
    // Smooth background: low-order polynomial ramp plus two broad cosines.
    let b0 = rng.gen_range(0.25..0.45);
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let (fx, fy) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let (px, py) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut image = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 / nf, y as f64 / nf);
            image[y * n + x] = b0
                + gx * xf
                + gy * yf
                + 0.05 * (std::f64::consts::TAU * fx * xf + px).cos()
                + 0.05 * (std::f64::consts::TAU * fy * yf + py).cos();
        }
    }

    let mut mask = MaskImage::filled(n, n, 0);
    let count = rng.gen_range(config.objects_min..=config.objects_max);
    let mut drawn = 0usize;
    let mut attempts = 0usize;
    while drawn < count.max(1) && attempts < 64 {
        attempts += 1;
        let shape = draw_shape(config, rng);
        let mut area = 0usize;
        for y in 0..n {
            for x in 0..n {
                if shape.level(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                    area += 1;
                }
            }
        }
        // Rejection sampling keeps the guarantee of one real component.
        if drawn == 0 && area < crate::objsize::DEFAULT_MIN_AREA {
            continue;
        }
        for y in 0..n {
            for x in 0..n {
                let lvl = shape.level(x as f64 + 0.5, y as f64 + 0.5);
                if lvl <= 1.0 {
                    mask.set(x, y, 1);
                    // Interior shading: brighter at the core, soft at the rim.
                    let shade = shape.brightness * (1.0 - 0.5 * lvl * lvl);
                    image[y * n + x] += shade;
                }
            }
        }
        drawn += 1;
    }
    if drawn == 0 {
        return Err(Error::BadOperand {
            op: "generate_synthetic",
            msg: "could not place a qualifying object in 64 attempts".into(),
        });
    }

    if config.noise_sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0, config.noise_sigma).expect("sigma");
        for v in image.iter_mut() {
            *v += rand_distr::Distribution::sample(&normal, rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((image, mask))
}

/// Quantize a sample back to rasters (images round to 8-bit).
pub fn sample_to_rasters(sample: &SegSample) -> (Raster, Raster) {
    let (h, w) = (sample.image.shape.h, sample.image.shape.w);
    let img = Raster {
        width: w,
        height: h,
        pixels: sample
            .image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    let mask = Raster {
        width: w,
        height: h,
        pixels: sample.mask.labels.clone(),
    };
    (img, mask)
}

/// Write a dataset as `images/*.pgm` + `masks/*.pgm`.
pub fn write_dataset(root: &Path, samples: &[SegSample]) -> Result<()> {
    for s in samples {
        let (img, mask) = sample_to_rasters(s);
        write_pgm(&root.join("images").join(format!("{}.pgm", s.id)), &img)?;
        write_pgm(&root.join("masks").join(format!("{}.pgm", s.id)), &mask)?;
    }
    Ok(())
}

#[cfg(test)]
#[path = "data_tests.rs"]
mod tests;
