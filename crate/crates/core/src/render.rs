//! Raster report artifacts: binary PGM images, saliency overlays, and
//! side-by-side panels. Chart and CSV writers live with the experiment
//! orchestration; everything here is plain pixels.

use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Gray levels used by [`overlay_pgm`]. The base image is compressed below
/// the boundary level so the three layers never collide, which keeps the
/// highlight count exactly recoverable from the output.
pub const OVERLAY_BASE_CEILING: u8 = 150;
pub const OVERLAY_BOUNDARY_LEVEL: u8 = 200;
pub const OVERLAY_HIGHLIGHT_LEVEL: u8 = 255;

/// An 8-bit grayscale raster with a binary PGM ("P5") encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` gray values.
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Pgm> {
        if width == 0 || height == 0 {
            return Err(Error::contract("raster extents must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::contract(format!(
                "{} pixels for a {width}×{height} raster",
                pixels.len()
            )));
        }
        Ok(Pgm {
            width,
            height,
            pixels,
        })
    }

    /// The exact file bytes: `P5`, dimensions, maxval 255, raw pixels.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.bytes())
    }
}

/// Min-max normalizes a real raster to 8-bit gray, returning the true
/// extrema alongside. A constant raster maps to all zeros.
pub fn normalized_pgm(raster: &Tensor<f32>) -> Result<(Pgm, f32, f32)> {
    let (h, w) = dims(raster)?;
    if !raster.is_finite() {
        return Err(Error::contract("cannot render non-finite values"));
    }
    let lo = raster.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = raster
        .data()
        .iter()
        .cloned()
        .fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let pixels = raster
        .data()
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((Pgm::new(w, h, pixels)?, lo, hi))
}

/// Writes the normalized PGM plus a `<path>.txt` sidecar holding the true
/// min and max, so the original value range can be reconstructed exactly.
pub fn write_raster_pgm(path: &Path, raster: &Tensor<f32>) -> Result<()> {
    let (pgm, lo, hi) = normalized_pgm(raster)?;
    pgm.write(path)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".txt");
    write_bytes(Path::new(&sidecar), format!("min {lo}\nmax {hi}\n").as_bytes())
}

/// Reads back a sidecar written by [`write_raster_pgm`].
pub fn read_minmax_sidecar(path: &Path) -> Result<(f32, f32)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lo = None;
    let mut hi = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("min ") {
            lo = v.trim().parse::<f32>().ok();
        } else if let Some(v) = line.strip_prefix("max ") {
            hi = v.trim().parse::<f32>().ok();
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) => Ok((lo, hi)),
        _ => Err(Error::format(path, "sidecar needs `min <v>` and `max <v>` lines")),
    }
}

/// Saliency drawn over the sample: the image compressed into dark grays,
/// the mask's inner boundary at a fixed mid level, and every pixel whose
/// |saliency| exceeds `threshold` at full white. Highlight wins where the
/// layers overlap, so counting full-white pixels recovers the number of
/// above-threshold saliency values.
pub fn overlay_pgm(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    saliency: &Tensor<f32>,
    threshold: f32,
) -> Result<Pgm> {
    let (h, w) = dims(image)?;
    if mask.shape() != image.shape() || saliency.shape() != image.shape() {
        return Err(Error::shape(format!(
            "overlay layers disagree: image {:?}, mask {:?}, saliency {:?}",
            image.shape(),
            mask.shape(),
            saliency.shape()
        )));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::contract(format!(
            "display threshold must be finite and ≥ 0, got {threshold}"
        )));
    }
    let (base, _, _) = normalized_pgm(image)?;
    let ceiling = OVERLAY_BASE_CEILING as f32 / 255.0;
    let mut pixels: Vec<u8> = base
        .pixels
        .iter()
        .map(|&v| (v as f32 * ceiling) as u8)
        .collect();
    for y in 0..h {
        for x in 0..w {
            if on_boundary(mask, h, w, y, x) {
                pixels[y * w + x] = OVERLAY_BOUNDARY_LEVEL;
            }
        }
    }
    for (i, &s) in saliency.data().iter().enumerate() {
        if s.abs() > threshold {
            pixels[i] = OVERLAY_HIGHLIGHT_LEVEL;
        }
    }
    Pgm::new(w, h, pixels)
}

/// Foreground pixel with at least one 4-neighbor outside the mask; raster
/// edges count as outside.
fn on_boundary(mask: &Tensor<f32>, h: usize, w: usize, y: usize, x: usize) -> bool {
    if mask.data()[y * w + x] != 1.0 {
        return false;
    }
    let bg = |yy: isize, xx: isize| -> bool {
        if yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
            return true;
        }
        mask.data()[yy as usize * w + xx as usize] == 0.0
    };
    let (y, x) = (y as isize, x as isize);
    bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1)
}

/// Renders a binary mask (or thresholded prediction) as 0/255.
pub fn mask_pgm(mask: &Tensor<f32>, threshold: f64) -> Result<Pgm> {
    let (h, w) = dims(mask)?;
    let pixels = mask
        .data()
        .iter()
        .map(|&v| if (v as f64) > threshold { 255u8 } else { 0u8 })
        .collect();
    Pgm::new(w, h, pixels)
}

/// Joins same-height frames left to right with a mid-gray separator column.
pub fn tile_horizontal(frames: &[Pgm], gap: usize) -> Result<Pgm> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("cannot tile zero frames"))?;
    let height = first.height;
    if frames.iter().any(|f| f.height != height) {
        return Err(Error::contract("tiled frames must share a height"));
    }
    let width: usize = frames.iter().map(|f| f.width).sum::<usize>() + gap * (frames.len() - 1);
    let mut pixels = vec![128u8; width * height];
    let mut x0 = 0;
    for frame in frames {
        for y in 0..height {
            let src = &frame.pixels[y * frame.width..(y + 1) * frame.width];
            pixels[y * width + x0..y * width + x0 + frame.width].copy_from_slice(src);
        }
        x0 += frame.width + gap;
    }
    Pgm::new(width, height, pixels)
}

fn dims(raster: &Tensor<f32>) -> Result<(usize, usize)> {
    if raster.rank() != 2 {
        return Err(Error::shape(format!(
            "expected a rank-2 raster, got shape {:?}",
            raster.shape()
        )));
    }
    Ok((raster.shape()[0], raster.shape()[1]))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_have_the_p5_layout() {
        let pgm = Pgm::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = pgm.bytes();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 10, 20, 30, 40, 255]);
    }

    #[test]
    fn normalization_spans_the_full_gray_range() {
        let raster = Tensor::new(&[1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let (pgm, lo, hi) = normalized_pgm(&raster).unwrap();
        assert_eq!((lo, hi), (-1.0, 1.0));
        assert_eq!(pgm.pixels, vec![0, 128, 255]);

        let flat = Tensor::filled(&[2, 2], 0.7);
        let (pgm, lo, hi) = normalized_pgm(&flat).unwrap();
        assert_eq!((lo, hi), (0.7, 0.7));
        assert!(pgm.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn sidecar_round_trips_the_true_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sal.pgm");
        let raster = Tensor::new(&[2, 2], vec![-0.25, 0.5, 1.5, 0.125]).unwrap();
        write_raster_pgm(&path, &raster).unwrap();
        let sidecar = dir.path().join("sal.pgm.txt");
        assert_eq!(read_minmax_sidecar(&sidecar).unwrap(), (-0.25, 1.5));

        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    }

    #[test]
    fn overlay_highlight_count_matches_thresholded_saliency() {
        let image = Tensor::filled(&[4, 4], 0.1);
        let mut mask = Tensor::zeros(&[4, 4]);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            mask.data_mut()[y * 4 + x] = 1.0;
        }
        let mut sal = Tensor::zeros(&[4, 4]);
        sal.data_mut()[0] = 0.8;
        sal.data_mut()[5] = -0.6; // also a boundary pixel; highlight wins
        sal.data_mut()[15] = 0.3;

        let pgm = overlay_pgm(&image, &mask, &sal, 0.5).unwrap();
        let highlighted = pgm
            .pixels
            .iter()
            .filter(|&&p| p == OVERLAY_HIGHLIGHT_LEVEL)
            .count();
        let above = sal.data().iter().filter(|v| v.abs() > 0.5).count();
        assert_eq!(highlighted, above);
        assert_eq!(highlighted, 2);

        // the 2×2 blob is all boundary; one of its pixels was repainted
        let boundary = pgm
            .pixels
            .iter()
            .filter(|&&p| p == OVERLAY_BOUNDARY_LEVEL)
            .count();
        assert_eq!(boundary, 3);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let mut mask = Tensor::zeros(&[5, 5]);
        for y in 1..4 {
            for x in 1..4 {
                mask.data_mut()[y * 5 + x] = 1.0;
            }
        }
        let image = Tensor::zeros(&[5, 5]);
        let sal = Tensor::zeros(&[5, 5]);
        let pgm = overlay_pgm(&image, &mask, &sal, 0.5).unwrap();
        assert_ne!(pgm.pixels[2 * 5 + 2], OVERLAY_BOUNDARY_LEVEL);
        let boundary = pgm
            .pixels
            .iter()
            .filter(|&&p| p == OVERLAY_BOUNDARY_LEVEL)
            .count();
        assert_eq!(boundary, 8);
    }

    #[test]
    fn tiling_preserves_each_frame() {
        let a = Pgm::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let b = Pgm::new(1, 2, vec![9, 8]).unwrap();
        let tiled = tile_horizontal(&[a, b], 1).unwrap();
        assert_eq!((tiled.width, tiled.height), (4, 2));
        assert_eq!(tiled.pixels, vec![1, 2, 128, 9, 3, 4, 128, 8]);

        let c = Pgm::new(2, 3, vec![0; 6]).unwrap();
        let d = Pgm::new(2, 2, vec![0; 4]).unwrap();
        assert!(tile_horizontal(&[c, d], 1).is_err());
    }

    #[test]
    fn mask_pgm_uses_a_strict_threshold() {
        let pred = Tensor::new(&[1, 3], vec![0.4, 0.5, 0.6]).unwrap();
        let pgm = mask_pgm(&pred, 0.5).unwrap();
        assert_eq!(pgm.pixels, vec![0, 0, 255]);
    }
}
