//! Depth rasters: PFM and scaled 16-bit PNG I/O, multi-scale average-pooled
//! targets, the Gaussian-noise corruption protocol, and log-domain clamping.

use std::collections::BTreeMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{avg_pool2d, Tensor};

pub const MIN_LOG_DEPTH: f64 = 0.1;
pub const MAX_LOG_DEPTH: f64 = 1000.0;

/// Metric depth in meters, row-major with a top-left origin.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    /// Validated constructor: finite, non-negative values only.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(width, height, data);
        if width == 0 || height == 0 || map.data.len() != width * height {
            return Err(Error::shape(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                map.data.len()
            )));
        }
        map.check_nonnegative()?;
        Ok(map)
    }

    pub fn new_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// First offending pixel, reported as `(x, y)`.
    pub fn check_nonnegative(&self) -> Result<()> {
        for (i, &d) in self.data.iter().enumerate() {
            let (x, y) = (i % self.width.max(1), i / self.width.max(1));
            if d.is_nan() {
                return Err(Error::invalid(format!("depth is NaN at (x={x}, y={y})")));
            }
            if d < 0.0 || d.is_infinite() {
                return Err(Error::invalid(format!(
                    "depth {d} at (x={x}, y={y}) is not a finite non-negative value"
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.data.clone())
            .expect("non-empty depth map")
    }

    fn from_tensor(t: &Tensor) -> Self {
        let (_, h, w) = t.dims3().expect("rank-3 tensor");
        Self::new_unchecked(w, h, t.data().to_vec())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DepthSummary {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn summarize(depth: &DepthMap) -> DepthSummary {
    let t = depth.to_tensor();
    DepthSummary {
        width: depth.width,
        height: depth.height,
        min: depth.data.iter().copied().fold(f64::INFINITY, f64::min),
        max: depth.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: t.sum() / t.len() as f64,
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG";

/// Loads a `Pf` PFM (scale = 1 m per unit) or a 16-bit grayscale PNG whose raw
/// values are multiplied by `png_scale` meters per unit.
pub fn load_depth(path: &Path, png_scale: f64) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PNG_MAGIC) {
        decode_png16(path, &bytes, png_scale)
    } else {
        decode_pfm(path, &bytes)
    }
}

fn decode_png16(path: &Path, bytes: &[u8], scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let img =
        image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|source| {
            Error::Image {
                path: path.to_path_buf(),
                source,
            }
        })?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(path, "depth PNG must be 16-bit grayscale"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = buf.pixels().map(|p| f64::from(p[0]) * scale).collect();
    DepthMap::new(w, h, data).map_err(|e| Error::format(path, e.to_string()))
}

fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<DepthMap> {
    let malformed = || Error::format(path, "malformed header");
    let mut pos = 0;
    let mut token = || -> Option<&str> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start)
            .then(|| std::str::from_utf8(&bytes[start..pos]).ok())
            .flatten()
    };
    let magic = token().ok_or_else(malformed)?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(
                path,
                "colour PFM (PF) is not a depth map; expected Pf",
            ))
        }
        _ => return Err(malformed()),
    }
    let width: usize = token().and_then(|t| t.parse().ok()).ok_or_else(malformed)?;
    let height: usize = token().and_then(|t| t.parse().ok()).ok_or_else(malformed)?;
    let scale: f64 = token().and_then(|t| t.parse().ok()).ok_or_else(malformed)?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(malformed());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed());
    }
    let body = &bytes[pos + 1..];
    let expected = width * height * 4;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("raster has {} bytes, header implies {expected}", body.len()),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // PFM rows run bottom to top
        let (x, file_row) = (i % width, i / width);
        let y = height - 1 - file_row;
        data[y * width + x] = f64::from(v);
    }
    DepthMap::new(width, height, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Little-endian `Pf` PFM with 32-bit samples.
pub fn save_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 4);
    for row in (0..depth.height).rev() {
        for &v in &depth.data[row * depth.width..(row + 1) * depth.width] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale PNG storing `round(d / scale)`, saturating at 65535.
pub fn save_depth_png16(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let v = (depth.get(x as usize, y as usize) / scale)
                .round()
                .clamp(0.0, 65535.0);
            Luma([v as u16])
        });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Average-pooled depth targets indexed by pyramid level `n` (stride `2^n`).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPyramid {
    pub levels: BTreeMap<u32, DepthMap>,
}

pub const PYRAMID_LEVELS: RangeInclusive<u32> = 3..=7;

pub fn pyramid_targets(depth: &DepthMap, levels: RangeInclusive<u32>) -> Result<DepthPyramid> {
    if levels.is_empty() {
        return Err(Error::invalid("pyramid level range is empty"));
    }
    let coarsest = 1usize << levels.end();
    if depth.width < coarsest || depth.height < coarsest {
        return Err(Error::invalid(format!(
            "depth map {}x{} is smaller than the coarsest stride {coarsest}",
            depth.width, depth.height
        )));
    }
    let full = depth.to_tensor();
    let mut out = BTreeMap::new();
    for n in levels {
        let pooled = avg_pool2d(&full, 1 << n)?;
        out.insert(n, DepthMap::from_tensor(&pooled));
    }
    Ok(DepthPyramid { levels: out })
}

/// Adds i.i.d. `N(0, variance)` noise then clamps at zero.
pub fn inject_noise(depth: &DepthMap, variance: f64, seed: u64) -> Result<DepthMap> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!(
            "noise variance must be >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(depth.clone());
    }
    let std = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = depth
        .data
        .iter()
        .map(|&d| (d + std * rng.sample::<f64, _>(StandardNormal)).max(0.0))
        .collect();
    Ok(DepthMap::new_unchecked(depth.width, depth.height, data))
}

/// Clamps into `[0.1, 1000]` m so logarithms stay finite.
pub fn clamp_log_domain(depth: &DepthMap) -> DepthMap {
    let data = depth
        .data
        .iter()
        .map(|&d| d.clamp(MIN_LOG_DEPTH, MAX_LOG_DEPTH))
        .collect();
    DepthMap::new_unchecked(depth.width, depth.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..7 * 5)
            .map(|_| f64::from(rng.random_range(0.0f32..300.0)))
            .collect();
        let map = DepthMap::new(7, 5, data).unwrap();
        let p = dir.path().join("d.pfm");
        save_depth_pfm(&p, &map).unwrap();
        let back = load_depth(&p, 1.0).unwrap();
        assert_eq!(back.width(), 7);
        assert!(map
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn big_endian_pfm_is_flipped_to_top_left_origin() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes()); // bottom row
        bytes.extend_from_slice(&7.0f32.to_be_bytes()); // top row
        let p = dir.path().join("be.pfm");
        fs::write(&p, bytes).unwrap();
        let map = load_depth(&p, 1.0).unwrap();
        assert_eq!(map.values(), &[7.0, 1.5]);
    }

    #[test]
    fn png16_value_scaled_to_meters() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(2, 2, Luma([5000]));
        let p = dir.path().join("d.png");
        img.save(&p).unwrap();
        let map = load_depth(&p, 0.01).unwrap();
        assert!(map.values().iter().all(|&v| (v - 50.0).abs() < 1e-12));
    }

    #[test]
    fn zero_byte_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.pfm");
        fs::write(&p, b"").unwrap();
        let err = load_depth(&p, 1.0).unwrap_err().to_string();
        assert!(err.contains("malformed header"), "{err}");
    }

    #[test]
    fn nan_and_negative_pixels_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        for (v, needle) in [(f32::NAN, "NaN at (x=1, y=0)"), (-3.0, "(x=1, y=0)")] {
            let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
            bytes.extend_from_slice(&v.to_le_bytes());
            let p = dir.path().join("bad.pfm");
            fs::write(&p, bytes).unwrap();
            let err = load_depth(&p, 1.0).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
    }

    #[test]
    fn truncated_raster_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.pfm");
        fs::write(&p, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(load_depth(&p, 1.0).is_err());
    }

    #[test]
    fn pyramid_level_sizes() {
        let map = DepthMap::constant(256, 256, 4.0).unwrap();
        let pyr = pyramid_targets(&map, PYRAMID_LEVELS).unwrap();
        let sizes: Vec<_> = pyr
            .levels
            .values()
            .map(|m| (m.width(), m.height()))
            .collect();
        assert_eq!(sizes, vec![(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]);
        assert!(pyr
            .levels
            .values()
            .all(|m| m.values().iter().all(|&v| v == 4.0)));
    }

    #[test]
    fn pyramid_ceil_sizes_on_ragged_input() {
        let map = DepthMap::constant(130, 200, 1.0).unwrap();
        let pyr = pyramid_targets(&map, PYRAMID_LEVELS).unwrap();
        assert_eq!(pyr.levels[&7].width(), 2);
        assert_eq!(pyr.levels[&7].height(), 2);
        assert_eq!(pyr.levels[&3].width(), 17);
        assert!(pyr
            .levels
            .values()
            .all(|m| m.values().iter().all(|&v| (v - 1.0).abs() < 1e-15)));
    }

    #[test]
    fn pyramid_rejects_small_input() {
        let map = DepthMap::constant(100, 256, 1.0).unwrap();
        assert!(pyramid_targets(&map, PYRAMID_LEVELS).is_err());
    }

    #[test]
    fn noise_examples() {
        let map = DepthMap::constant(16, 16, 5.0).unwrap();
        assert_eq!(inject_noise(&map, 0.0, 1).unwrap(), map);
        assert_eq!(
            inject_noise(&map, 2.0, 9).unwrap(),
            inject_noise(&map, 2.0, 9).unwrap()
        );
        let near_zero = DepthMap::constant(32, 32, 0.5).unwrap();
        assert!(inject_noise(&near_zero, 9.0, 3)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v >= 0.0));
    }

    #[test]
    fn clamp_examples() {
        let map = DepthMap::new(3, 1, vec![0.0, 50.0, 1e6]).unwrap();
        assert_eq!(clamp_log_domain(&map).values(), &[0.1, 50.0, 1000.0]);
    }
}
