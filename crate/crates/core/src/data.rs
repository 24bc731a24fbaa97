//! Synthetic dataset generation, preprocessing, and the on-disk container.
//!
//! Samples are grayscale rasters with binary masks. The synthetic generator
//! places soft-edged elliptical structures on a noisy background, producing
//! organ-like blobs entirely from seeded integer-state randomness, so
//! datasets are bit-identical across platforms for a given seed.
//!
//! Container layout (normative, see `docs/FORMATS.md`): a directory holding
//! `manifest.json` plus one raster file per sample. Raster files start with
//! the magic `LSBR`, then height and width as little-endian u32, then H·W
//! little-endian f32 image values, then H·W mask bytes in {0,1}.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"LSBR";
pub const MANIFEST_NAME: &str = "manifest.json";
pub const INTENSITY_MAX_DEFAULT: f32 = 0.2;

/// One image/mask pair. Rasters are rank-2 `[H, W]`; the mask holds only
/// 0.0 and 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    fn check(&self) -> Result<()> {
        if self.image.rank() != 2 {
            return Err(Error::contract(format!(
                "sample {}: raster must be rank 2, got {:?}",
                self.id,
                self.image.shape()
            )));
        }
        if self.image.shape() != self.mask.shape() {
            return Err(Error::contract(format!(
                "sample {}: image shape {:?} does not match mask shape {:?}",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if let Some((i, &v)) = self
            .mask
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(Error::contract(format!(
                "sample {}: mask value {v} at flat index {i} is not in {{0,1}}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

/// Ordered, uniformly-sized collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub intensity_max: f32,
    pub provenance: Provenance,
    pub split: String,
    /// Generator seed for synthetic data; `None` for ingested data.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        intensity_max: f32,
        provenance: Provenance,
        split: impl Into<String>,
        seed: Option<u64>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        if intensity_max <= 0.0 {
            return Err(Error::contract(format!(
                "intensity_max must be > 0, got {intensity_max}"
            )));
        }
        let shape = samples[0].image.shape().to_vec();
        for s in &samples {
            s.check()?;
            if s.image.shape() != shape {
                return Err(Error::contract(format!(
                    "sample {}: raster shape {:?} differs from dataset shape {shape:?}",
                    s.id,
                    s.image.shape()
                )));
            }
        }
        Ok(Dataset {
            samples,
            intensity_max,
            provenance,
            split: split.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.samples[0].height()
    }

    pub fn width(&self) -> usize {
        self.samples[0].width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Two blobs per image, echoing paired anatomical structures.
    EllipsePair,
    SingleBlob,
}

fn default_count() -> usize {
    64
}
fn default_extent() -> usize {
    32
}
fn default_family() -> ShapeFamily {
    ShapeFamily::EllipsePair
}
fn default_noise() -> f64 {
    0.08
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_family")]
    pub family: ShapeFamily,
    /// Amplitude of the additive texture noise relative to the
    /// foreground/background contrast.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: default_count(),
            height: default_extent(),
            width: default_extent(),
            family: default_family(),
            noise: default_noise(),
            seed: default_seed(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.count < 1 {
            problems.push("count: must be ≥ 1".to_string());
        }
        if self.height % 4 != 0 || self.height == 0 {
            problems.push(format!(
                "height: must be a positive multiple of 4, got {}",
                self.height
            ));
        }
        if self.width % 4 != 0 || self.width == 0 {
            problems.push(format!(
                "width: must be a positive multiple of 4, got {}",
                self.width
            ));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            problems.push(format!("noise: must be ≥ 0, got {}", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    /// Normalized squared distance: ≤ 1 inside, grows outward.
    fn field(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos_t + dy * self.sin_t) / self.rx;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ry;
        u * u + v * v
    }
}

/// Cubic smoothstep on [0,1]; pure arithmetic keeps generation bit-stable
/// across platforms (no libm calls anywhere in the generator).
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Produces `cfg.count` samples of softly shaded elliptical foreground
/// structures over textured background, masks cut from the exact geometry,
/// images min-max scaled to [0, intensity_max].
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let min_extent = h.min(w) as f64;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut stream = rng::stream(rng::derive_seed(cfg.seed, i, 0));
        let shape_count = match cfg.family {
            ShapeFamily::EllipsePair => 2,
            ShapeFamily::SingleBlob => 1,
        };
        let mut shapes = Vec::with_capacity(shape_count);
        for _ in 0..shape_count {
            let rx = (rng::uniform_f64(&mut stream, 0.10, 0.18) * min_extent).max(1.5);
            let ry = (rng::uniform_f64(&mut stream, 0.10, 0.18) * min_extent).max(1.5);
            let reach = rx.max(ry) + 1.0;
            let cy = rng::uniform_f64(&mut stream, reach, h as f64 - 1.0 - reach);
            let cx = rng::uniform_f64(&mut stream, reach, w as f64 - 1.0 - reach);
            // rotation via a seeded point on the unit circle, no trig calls
            let (cos_t, sin_t) = loop {
                let a = rng::uniform_f64(&mut stream, -1.0, 1.0);
                let b = rng::uniform_f64(&mut stream, -1.0, 1.0);
                let n2 = a * a + b * b;
                if n2 > 1e-3 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    break (a / n, b / n);
                }
            };
            shapes.push(Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos_t,
                sin_t,
            });
        }

        let mut image = vec![0.0f32; h * w];
        let mut mask = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut inside = false;
                let mut shade = 0.0f64;
                for e in &shapes {
                    let d = e.field(y as f64 + 0.5, x as f64 + 0.5);
                    inside |= d <= 1.0;
                    // soft edge: full brightness well inside, fading to
                    // background slightly beyond the mask boundary
                    shade = shade.max(smoothstep((1.15 - d) / 0.45));
                }
                let noise = rng::uniform_f64(&mut stream, -cfg.noise, cfg.noise);
                let value = 0.25 + 0.6 * shade + noise;
                image[y * w + x] = value as f32;
                mask[y * w + x] = if inside { 1.0 } else { 0.0 };
            }
        }
        let image = scale_to_range(
            &Tensor::new(&[h, w], image)?,
            INTENSITY_MAX_DEFAULT,
        );
        samples.push(Sample {
            id: format!("synthetic-{i:04}"),
            image,
            mask: Tensor::new(&[h, w], mask)?,
        });
    }
    Dataset::new(
        samples,
        INTENSITY_MAX_DEFAULT,
        Provenance::Synthetic,
        "synthetic",
        Some(cfg.seed),
    )
}

/// Centers `raster` in a zero-filled `[ht, wt]` raster; when the padding is
/// odd the extra row/column goes bottom/right.
pub fn zero_pad(raster: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>> {
    let (ht, wt) = target;
    let (h, w) = raster_extents(raster)?;
    if ht < h || wt < w {
        return Err(Error::contract(format!(
            "zero_pad: target {ht}×{wt} is smaller than source {h}×{w}"
        )));
    }
    let (top, left) = ((ht - h) / 2, (wt - w) / 2);
    let mut out = vec![0.0f32; ht * wt];
    for y in 0..h {
        let src = &raster.data()[y * w..(y + 1) * w];
        out[(top + y) * wt + left..(top + y) * wt + left + w].copy_from_slice(src);
    }
    Tensor::new(&[ht, wt], out)
}

/// Inverse of [`zero_pad`]'s placement: cuts the centered `[ht, wt]` window
/// (extra margin assumed bottom/right).
pub fn crop_center(raster: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>> {
    let (ht, wt) = target;
    let (h, w) = raster_extents(raster)?;
    if ht > h || wt > w {
        return Err(Error::contract(format!(
            "crop_center: target {ht}×{wt} exceeds source {h}×{w}"
        )));
    }
    let (top, left) = ((h - ht) / 2, (w - wt) / 2);
    let mut out = vec![0.0f32; ht * wt];
    for y in 0..ht {
        let src = &raster.data()[(top + y) * w + left..(top + y) * w + left + wt];
        out[y * wt..(y + 1) * wt].copy_from_slice(src);
    }
    Tensor::new(&[ht, wt], out)
}

fn raster_extents(raster: &Tensor<f32>) -> Result<(usize, usize)> {
    if raster.rank() != 2 {
        return Err(Error::contract(format!(
            "expected a rank-2 raster, got shape {:?}",
            raster.shape()
        )));
    }
    Ok((raster.shape()[0], raster.shape()[1]))
}

/// Min-max scaling onto [0, intensity_max]; a constant raster maps to zeros.
pub fn scale_to_range(raster: &Tensor<f32>, intensity_max: f32) -> Tensor<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in raster.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Tensor::zeros(raster.shape());
    }
    // the clamp absorbs the one-ulp overshoot of (hi−lo)·scale
    let scale = intensity_max / (hi - lo);
    raster.map(|v| ((v - lo) * scale).clamp(0.0, intensity_max))
}

/// Splits a `[D,H,W]` volume into per-frame samples, depth order preserved,
/// ids carrying the frame index.
pub fn slice_volume(
    volume: &Tensor<f32>,
    mask_volume: &Tensor<f32>,
    id_prefix: &str,
) -> Result<Vec<Sample>> {
    if volume.rank() != 3 {
        return Err(Error::contract(format!(
            "slice_volume: expected rank 3, got {:?}",
            volume.shape()
        )));
    }
    if volume.shape() != mask_volume.shape() {
        return Err(Error::contract(format!(
            "slice_volume: volume shape {:?} does not match mask shape {:?}",
            volume.shape(),
            mask_volume.shape()
        )));
    }
    let (d, h, w) = (volume.shape()[0], volume.shape()[1], volume.shape()[2]);
    let mut samples = Vec::with_capacity(d);
    for frame in 0..d {
        let range = frame * h * w..(frame + 1) * h * w;
        let sample = Sample {
            id: format!("{id_prefix}-{frame:04}"),
            image: Tensor::new(&[h, w], volume.data()[range.clone()].to_vec())?,
            mask: Tensor::new(&[h, w], mask_volume.data()[range].to_vec())?,
        };
        sample.check()?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    intensity_max: f32,
    provenance: Provenance,
    split: String,
    seed: Option<u64>,
    samples: Vec<ManifestSample>,
}

fn raster_bytes(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.height() as u32, sample.width() as u32);
    let mut bytes = Vec::with_capacity(12 + sample.image.numel() * 5);
    bytes.extend_from_slice(RASTER_MAGIC);
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    for &v in sample.image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &m in sample.mask.data() {
        bytes.push(if m == 1.0 { 1 } else { 0 });
    }
    bytes
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("writing to String cannot fail");
    }
    hex
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.to_path_buf(), reason.into())
}

/// Writes the dataset container into `dir` (created if needed).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        sample.check()?;
        let file = format!("sample-{i:04}.lsbr");
        let bytes = raster_bytes(sample);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(path.clone(), e))?;
        entries.push(ManifestSample {
            id: sample.id.clone(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        intensity_max: ds.intensity_max,
        provenance: ds.provenance,
        split: ds.split.clone(),
        seed: ds.seed,
        samples: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| format_err(&path, format!("manifest serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

struct RasterReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> RasterReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.path,
                format!(
                    "truncated: needed {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_raster(bytes: &[u8], path: &Path, id: &str) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut r = RasterReader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != RASTER_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {magic:?}, expected {RASTER_MAGIC:?}"),
        ));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 || h * w > 1 << 28 {
        return Err(format_err(path, format!("implausible extents {h}×{w}")));
    }
    let image_bytes = r.take(h * w * 4, "image data")?;
    let image: Vec<f32> = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask_bytes = r.take(h * w, "mask data")?;
    if r.pos != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after mask", bytes.len() - r.pos),
        ));
    }
    let mut mask = Vec::with_capacity(h * w);
    for (i, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => mask.push(0.0f32),
            1 => mask.push(1.0f32),
            other => {
                return Err(format_err(
                    path,
                    format!("sample {id}: mask byte {other} at flat index {i} is not in {{0,1}}"),
                ))
            }
        }
    }
    Ok((Tensor::new(&[h, w], image)?, Tensor::new(&[h, w], mask)?))
}

/// Reads a dataset container, verifying per-file checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.clone(), e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| format_err(&manifest_path, format!("manifest parse: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| {
            format_err(
                &path,
                format!("sample {}: raster file unreadable: {e}", entry.id),
            )
        })?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(format_err(
                &path,
                format!(
                    "sample {}: checksum mismatch (manifest {}, file {digest})",
                    entry.id, entry.sha256
                ),
            ));
        }
        let (image, mask) = parse_raster(&bytes, &path, &entry.id)?;
        samples.push(Sample {
            id: entry.id.clone(),
            image,
            mask,
        });
    }
    Dataset::new(
        samples,
        manifest.intensity_max,
        manifest.provenance,
        manifest.split,
        manifest.seed,
    )
}
