//! 8-bit PNG input and output.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[0, 1]` → `0..=255` with round-half-even, clamping out-of-range values.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes a `[3, H, W]` image as RGB or an `[H, W]` map as grayscale.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let d = image.data();
    match s.len() {
        3 if s[0] == 3 => {
            let (h, w) = (s[1], s[2]);
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                image::Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
            });
            img.save(path)?;
        }
        2 => {
            let (h, w) = (s[0], s[1]);
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(d[y as usize * w + x as usize])]));
            img.save(path)?;
        }
        _ => return Err(Error::dim("save_png", s, &[3, 0, 0])),
    }
    Ok(())
}

/// Reads any PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new(
        &[3, h, w],
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raw[p * 3 + c] as f64 / 255.0
            })
            .collect(),
    )
}
