//! 8-bit RGB PNG in and out, as `[3, H, W]` tensors in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Round-half-away-from-zero quantization to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("non-empty image")
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| quantize(t.data()[(ch * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
