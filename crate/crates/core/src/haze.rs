//! Haze synthesis with the atmospheric scattering model
//! `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
//!
//! Atmospheric light `A` and scattering coefficient `β` are drawn per image
//! from truncated normals by rejection sampling. Every draw is seeded, so a
//! corpus can be regenerated bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest};
use crate::depth::{load_depth, DepthMap};
use crate::error::{Error, Result};
use crate::imageio::{read_rgb, write_rgb};
use crate::tensor::Tensor;

/// Rejection-sampling budget per draw before the config is declared degenerate.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Atmospheric light in [0, 1].
    #[serde(rename = "A")]
    pub atmospheric_light: f64,
    /// Scattering coefficient, 1/m.
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtmosphereConfig {
    #[serde(rename = "A_mean")]
    pub a_mean: f64,
    #[serde(rename = "A_std")]
    pub a_std: f64,
    #[serde(rename = "A_min")]
    pub a_min: f64,
    #[serde(rename = "A_max")]
    pub a_max: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AtmosphereConfig {
    fn default() -> Self {
        Self {
            a_mean: 0.8,
            a_std: 0.05,
            a_min: 0.7,
            a_max: 0.9,
            beta_mean: 0.045,
            beta_std: 0.02,
            beta_min: 0.02,
            beta_max: 0.16,
        }
    }
}

impl AtmosphereConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, mean: f64, std: f64, lo: f64, hi: f64| -> Result<()> {
            if !(lo < hi) {
                return Err(Error::invalid(format!(
                    "{name}: min {lo} must be < max {hi}"
                )));
            }
            if !(std > 0.0) {
                return Err(Error::invalid(format!(
                    "{name}: std must be > 0, got {std}"
                )));
            }
            if !(lo..=hi).contains(&mean) {
                return Err(Error::invalid(format!(
                    "{name}: mean {mean} outside [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        check("A", self.a_mean, self.a_std, self.a_min, self.a_max)?;
        check(
            "beta",
            self.beta_mean,
            self.beta_std,
            self.beta_min,
            self.beta_max,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draws from `N(mean, std²)` restricted to `[lo, hi]`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    std: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = rng.sample(StandardNormal);
        let v = mean + std * z;
        if (lo..=hi).contains(&v) {
            return Ok(v);
        }
    }
    Err(Error::invalid(format!(
        "truncated normal N({mean}, {std}²) on [{lo}, {hi}] rejected {MAX_REJECTIONS} draws; degenerate config"
    )))
}

/// Deterministic per seed: draws `A` first, then `β`, from one ChaCha stream.
pub fn sample_atmosphere(config: &AtmosphereConfig, seed: u64) -> Result<HazeParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atmospheric_light = sample_truncated_normal(
        &mut rng,
        config.a_mean,
        config.a_std,
        config.a_min,
        config.a_max,
    )?;
    let beta = sample_truncated_normal(
        &mut rng,
        config.beta_mean,
        config.beta_std,
        config.beta_min,
        config.beta_max,
    )?;
    Ok(HazeParams {
        atmospheric_light,
        beta,
    })
}

/// Per-pixel transmission in (0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    pub width: usize,
    pub height: usize,
    pub t: Vec<f64>,
}

pub fn transmission_map(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    depth.check_nonnegative()?;
    Ok(TransmissionMap {
        width: depth.width(),
        height: depth.height(),
        t: depth.values().iter().map(|&d| (-beta * d).exp()).collect(),
    })
}

/// Applies the scattering model to a clear `[3, H, W]` image in [0, 1].
pub fn composite_haze(
    clear: &Tensor,
    t: &TransmissionMap,
    atmospheric_light: f64,
) -> Result<Tensor> {
    let (c, h, w) = clear.dims3()?;
    if (h, w) != (t.height, t.width) {
        return Err(Error::shape(format!(
            "composite_haze: image is {w}x{h}, transmission map is {}x{}",
            t.width, t.height
        )));
    }
    if let Some(pos) = clear.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!(
            "composite_haze: clear value {} at flat index {pos} outside [0,1]",
            clear.data()[pos]
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(clear.len());
    for ch in 0..c {
        for (j, &tv) in clear.channel(ch).iter().zip(&t.t) {
            out.push(j * tv + atmospheric_light * (1.0 - tv));
        }
    }
    debug_assert_eq!(out.len(), c * plane);
    Tensor::from_vec(clear.shape(), out)
}

/// Hazy image before quantization.
pub fn synthesize_image(clear: &Tensor, depth: &DepthMap, params: &HazeParams) -> Result<Tensor> {
    let t = transmission_map(depth, params.beta)?;
    composite_haze(clear, &t, params.atmospheric_light)
}

/// Per-image seed; independent of processing order.
pub fn image_seed(base_seed: u64, index: usize) -> u64 {
    base_seed ^ index as u64
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthFailure {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthReport {
    pub manifest: Manifest,
    pub errors: Vec<SynthFailure>,
}

/// Where the clear images come from.
pub enum SynthInput<'a> {
    /// Every `*.png` in a directory, sorted by name; depth is looked up by
    /// stem (`<stem>.pfm` first, then `<stem>.png` scaled by `png_depth_scale`).
    Directory {
        image_dir: &'a Path,
        depth_dir: &'a Path,
        png_depth_scale: f64,
    },
    /// Images, depth references and annotations taken from a manifest whose
    /// relative paths resolve against `base_dir`.
    Manifest {
        manifest: &'a Manifest,
        base_dir: &'a Path,
    },
}

struct Job {
    record: ImageRecord,
    image_path: PathBuf,
    depth_path: Option<PathBuf>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn find_depth(depth_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["pfm", "png"]
        .iter()
        .map(|ext| depth_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn relative_string(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

/// Writes one hazy PNG per input image into `out_dir` plus `manifest.json`.
///
/// Images whose depth is missing or unusable are skipped and reported in
/// [`SynthReport::errors`]; everything else still gets written.
pub fn synthesize_dataset(
    input: SynthInput<'_>,
    out_dir: &Path,
    config: &AtmosphereConfig,
    base_seed: u64,
) -> Result<SynthReport> {
    config.validate()?;
    let (jobs, annotations, categories) = match input {
        SynthInput::Directory {
            image_dir,
            depth_dir,
            png_depth_scale,
        } => {
            if !depth_dir.is_dir() {
                return Err(Error::io(
                    depth_dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "depth directory not found"),
                ));
            }
            let mut jobs = Vec::new();
            for (i, path) in png_files(image_dir)?.into_iter().enumerate() {
                let stem = path
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                let depth_path = find_depth(depth_dir, &stem);
                let depth_scale = match depth_path.as_ref().and_then(|p| p.extension()) {
                    Some(e) if e == "png" => png_depth_scale,
                    _ => 1.0,
                };
                jobs.push(Job {
                    record: ImageRecord {
                        id: i as u64,
                        file: relative_string(path.file_name().unwrap().as_ref()),
                        width: 0,
                        height: 0,
                        depth_file: depth_path.as_deref().map(relative_string),
                        depth_scale,
                        split: None,
                        haze_params: None,
                    },
                    image_path: path,
                    depth_path,
                });
            }
            (jobs, Vec::new(), crate::dataset::Category::ALL.to_vec())
        }
        SynthInput::Manifest { manifest, base_dir } => {
            let jobs = manifest
                .images
                .iter()
                .map(|rec| Job {
                    record: rec.clone(),
                    image_path: base_dir.join(&rec.file),
                    depth_path: rec.depth_file.as_ref().map(|d| base_dir.join(d)),
                })
                .collect();
            (
                jobs,
                manifest.annotations.clone(),
                manifest.categories.clone(),
            )
        }
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut images = Vec::new();
    let mut errors = Vec::new();
    for (index, job) in jobs.into_iter().enumerate() {
        match synthesize_one(&job, out_dir, config, image_seed(base_seed, index)) {
            Ok(rec) => images.push(rec),
            Err(e) => errors.push(SynthFailure {
                file: job.record.file.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let kept: std::collections::BTreeSet<u64> = images.iter().map(|r| r.id).collect();
    let manifest = Manifest {
        images,
        annotations: annotations
            .into_iter()
            .filter(|a| kept.contains(&a.image_id))
            .collect(),
        categories,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(SynthReport { manifest, errors })
}

fn synthesize_one(
    job: &Job,
    out_dir: &Path,
    config: &AtmosphereConfig,
    seed: u64,
) -> Result<ImageRecord> {
    let depth_path = job
        .depth_path
        .as_ref()
        .filter(|p| p.is_file())
        .ok_or_else(|| Error::invalid(format!("no depth file for {}", job.record.file)))?;
    let clear = read_rgb(&job.image_path)?;
    let depth = load_depth(depth_path, job.record.depth_scale)?;
    let (_, h, w) = clear.dims3()?;
    if (depth.width(), depth.height()) != (w, h) {
        return Err(Error::shape(format!(
            "depth {}x{} does not match image {w}x{h}",
            depth.width(),
            depth.height()
        )));
    }
    let params = sample_atmosphere(config, seed)?;
    let hazy = synthesize_image(&clear, &depth, &params)?;
    let name = Path::new(&job.record.file)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("{}.png", job.record.id));
    write_rgb(&out_dir.join(&name), &hazy)?;
    let mut record = job.record.clone();
    record.file = name;
    record.width = w as u32;
    record.height = h as u32;
    record.depth_file = Some(relative_string(&relative_to(depth_path, out_dir)));
    record.haze_params = Some(params);
    Ok(record)
}

/// Expresses `target` relative to `base` when both are absolute or both relative.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir()
                .map(|c| c.join(p))
                .unwrap_or_else(|_| p.to_path_buf())
        }
    };
    let (t, b) = (normalize(&abs(target)), normalize(&abs(base)));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth(values: Vec<f64>, w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, values).unwrap()
    }

    #[test]
    fn sampler_respects_bounds() {
        let cfg = AtmosphereConfig::default();
        for seed in 0..2000 {
            let p = sample_atmosphere(&cfg, seed).unwrap();
            assert!((0.7..=0.9).contains(&p.atmospheric_light));
            assert!((0.02..=0.16).contains(&p.beta));
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let cfg = AtmosphereConfig::default();
        assert_eq!(
            sample_atmosphere(&cfg, 42).unwrap(),
            sample_atmosphere(&cfg, 42).unwrap()
        );
        assert_ne!(
            sample_atmosphere(&cfg, 42).unwrap(),
            sample_atmosphere(&cfg, 43).unwrap()
        );
    }

    #[test]
    fn degenerate_std_collapses_to_mean() {
        let cfg = AtmosphereConfig {
            a_std: 1e-12,
            ..AtmosphereConfig::default()
        };
        let p = sample_atmosphere(&cfg, 7).unwrap();
        assert!((p.atmospheric_light - 0.8).abs() < 1e-9);
    }

    #[test]
    fn unreachable_interval_hits_rejection_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_truncated_normal(&mut rng, 0.0, 1e-3, 0.5, 0.6).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AtmosphereConfig {
            a_min: 0.9,
            a_max: 0.7,
            ..AtmosphereConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AtmosphereConfig {
            beta_std: 0.0,
            ..AtmosphereConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transmission_examples() {
        let zero = depth(vec![0.0; 4], 2, 2);
        assert!(transmission_map(&zero, 0.1)
            .unwrap()
            .t
            .iter()
            .all(|&t| t == 1.0));
        let d = depth(vec![5.0, 20.0, 100.0, 3.0], 2, 2);
        assert!(transmission_map(&d, 0.0)
            .unwrap()
            .t
            .iter()
            .all(|&t| t == 1.0));
        let t = transmission_map(&depth(vec![20.0], 1, 1), 0.045).unwrap();
        assert!((t.t[0] - 0.406570).abs() < 5e-7);
    }

    #[test]
    fn transmission_rejects_negative_depth_with_coordinate() {
        let d = DepthMap::new_unchecked(3, 2, vec![1.0, 1.0, 1.0, 1.0, -2.0, 1.0]);
        let err = transmission_map(&d, 0.05).unwrap_err().to_string();
        assert!(err.contains("(x=1, y=1)"), "{err}");
    }

    #[test]
    fn composite_examples() {
        let j = Tensor::full(&[3, 1, 1], 0.5);
        let t = |v: f64| TransmissionMap {
            width: 1,
            height: 1,
            t: vec![v],
        };
        assert_eq!(composite_haze(&j, &t(1.0), 0.8).unwrap(), j);
        assert!(composite_haze(&j, &t(0.0), 0.8)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.8));
        let i = composite_haze(&j, &t(0.406570), 0.8).unwrap();
        assert!((i.data()[0] - 0.678029).abs() < 5e-7);
    }

    #[test]
    fn composite_rejects_resolution_mismatch() {
        let j = Tensor::full(&[3, 2, 2], 0.5);
        let t = TransmissionMap {
            width: 1,
            height: 1,
            t: vec![1.0],
        };
        assert!(matches!(composite_haze(&j, &t, 0.8), Err(Error::Shape(_))));
    }

    #[test]
    fn haze_grows_with_depth_when_airlight_brighter() {
        let clear = Tensor::full(&[3, 1, 4], 0.2);
        let d = depth(vec![1.0, 10.0, 50.0, 200.0], 4, 1);
        let p = HazeParams {
            atmospheric_light: 0.8,
            beta: 0.045,
        };
        let out = synthesize_image(&clear, &d, &p).unwrap();
        let row = out.channel(0);
        assert!(row.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn relative_paths() {
        assert_eq!(
            relative_to(Path::new("/a/b/depth/x.pfm"), Path::new("/a/out")),
            PathBuf::from("../b/depth/x.pfm")
        );
    }
}
