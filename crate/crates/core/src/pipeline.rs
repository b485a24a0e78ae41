//! Batch assembly and inference: center-crop plus nearest resize to the
//! model's square input, target encoding, and detection decoding back to
//! image pixels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{BBox, Category, ImageRecord, Manifest};
use crate::depth::{clamp_log_domain, inject_noise, load_depth, pyramid_targets, DepthMap};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::imageio::read_rgb;
use crate::losses::LevelTargets;
use crate::model::{decode, encode_targets, DecodeConfig, ModelConfig, ToyModel};
use crate::tensor::{StatsMode, Tensor};

/// Square crop `(ox, oy, side)` followed by a resize by `scale = size / side`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub ox: usize,
    pub oy: usize,
    pub side: usize,
    pub size: usize,
}

impl Fit {
    pub fn new(width: usize, height: usize, size: usize) -> Self {
        let side = width.min(height);
        Self {
            ox: (width - side) / 2,
            oy: (height - side) / 2,
            side,
            size,
        }
    }

    pub fn scale(&self) -> f64 {
        self.size as f64 / self.side as f64
    }

    fn src(&self, dst: usize) -> usize {
        (((dst as f64 + 0.5) / self.scale()) as usize).min(self.side - 1)
    }

    /// Resamples a `[C, H, W]` tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.dims3()?;
        let s = self.size;
        let mut out = vec![0.0; c * s * s];
        for ch in 0..c {
            let plane = t.channel(ch);
            for y in 0..s {
                let sy = self.oy + self.src(y);
                for x in 0..s {
                    let sx = self.ox + self.src(x);
                    debug_assert!(sy < h && sx < w);
                    out[(ch * s + y) * s + x] = plane[sy * w + sx];
                }
            }
        }
        Tensor::from_vec(&[c, s, s], out)
    }

    /// Box into input pixels, clipped to the crop; `None` if nothing remains.
    pub fn forward_box(&self, b: &BBox) -> Option<BBox> {
        let k = self.scale();
        let lim = self.size as f64;
        let x0 = ((b[0] - self.ox as f64) * k).clamp(0.0, lim);
        let y0 = ((b[1] - self.oy as f64) * k).clamp(0.0, lim);
        let x1 = ((b[0] + b[2] - self.ox as f64) * k).clamp(0.0, lim);
        let y1 = ((b[1] + b[3] - self.oy as f64) * k).clamp(0.0, lim);
        (x1 - x0 >= 1.0 && y1 - y0 >= 1.0).then_some([x0, y0, x1 - x0, y1 - y0])
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let k = self.scale();
        [
            b[0] / k + self.ox as f64,
            b[1] / k + self.oy as f64,
            b[2] / k,
            b[3] / k,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: u64,
    pub image: Tensor,
    pub targets: Vec<LevelTargets>,
    /// Pseudo-depth per level, `[1, h, w]`; empty when the image has no depth file.
    pub depth: BTreeMap<u32, Tensor>,
}

/// Options for turning manifest entries into training samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// Variance of Gaussian noise added to the pseudo-depth; 0 disables.
    pub depth_noise_variance: f64,
    pub seed: u64,
}

pub fn load_sample(
    record: &ImageRecord,
    boxes: &[(Category, BBox)],
    base_dir: &Path,
    config: &ModelConfig,
    opts: &SampleOptions,
) -> Result<Sample> {
    let image = read_rgb(&base_dir.join(&record.file))?;
    let (_, h, w) = image.dims3()?;
    let fit = Fit::new(w, h, config.input_size);
    let input = fit.apply(&image)?;
    let fitted: Vec<(usize, BBox)> = boxes
        .iter()
        .filter_map(|(c, b)| fit.forward_box(b).map(|fb| (c.index(), fb)))
        .collect();
    let targets = encode_targets(config, &fitted);
    let mut depth = BTreeMap::new();
    if let Some(rel) = &record.depth_file {
        let mut d = load_depth(&base_dir.join(rel), record.depth_scale)?;
        if (d.width(), d.height()) != (w, h) {
            return Err(Error::shape(format!(
                "depth {}x{} does not match image {}x{} for image {}",
                d.width(),
                d.height(),
                w,
                h,
                record.id
            )));
        }
        if opts.depth_noise_variance > 0.0 {
            d = inject_noise(&d, opts.depth_noise_variance, opts.seed ^ record.id)?;
        }
        let resized = fit.apply(&d.to_tensor())?;
        let s = config.input_size;
        let dm = DepthMap::new(s, s, resized.into_data())?;
        let lo = *config.levels.first().expect("validated");
        let hi = *config.levels.last().expect("validated");
        let pyr = pyramid_targets(&dm, lo..=hi)?;
        for (n, level) in pyr.levels {
            depth.insert(n, clamp_log_domain(&level).to_tensor());
        }
    }
    Ok(Sample {
        image_id: record.id,
        image: input,
        targets,
        depth,
    })
}

/// Annotations of each image as `(category, bbox)`.
pub fn boxes_by_image(manifest: &Manifest) -> BTreeMap<u64, Vec<(Category, BBox)>> {
    let mut map: BTreeMap<u64, Vec<(Category, BBox)>> = BTreeMap::new();
    for a in &manifest.annotations {
        map.entry(a.image_id)
            .or_default()
            .push((a.category, a.bbox));
    }
    map
}

pub fn predict_image(
    model: &ToyModel,
    record: &ImageRecord,
    base_dir: &Path,
    opts: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let image = read_rgb(&base_dir.join(&record.file))?;
    let (_, h, w) = image.dims3()?;
    let fit = Fit::new(w, h, model.config.input_size);
    let fp = model.forward(&fit.apply(&image)?, StatsMode::Batch)?;
    Ok(decode(&model.config, &fp.heads, opts)
        .into_iter()
        .filter_map(|d| {
            let b = fit.inverse_box(&d.bbox);
            let x0 = b[0].clamp(0.0, w as f64);
            let y0 = b[1].clamp(0.0, h as f64);
            let x1 = (b[0] + b[2]).clamp(0.0, w as f64);
            let y1 = (b[1] + b[3]).clamp(0.0, h as f64);
            (x1 > x0 && y1 > y0).then(|| Detection {
                image_id: record.id,
                bbox: [x0, y0, x1 - x0, y1 - y0],
                category: Category::from_index(d.category).expect("class index"),
                score: d.score,
            })
        })
        .collect())
}

/// Detections for every image of the manifest, in manifest order.
pub fn predict(
    model: &ToyModel,
    manifest: &Manifest,
    base_dir: &Path,
    opts: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for rec in &manifest.images {
        out.extend(predict_image(model, rec, base_dir, opts)?);
    }
    Ok(out)
}
