//! Canny edge detector on `[H, W]` grayscale images in [0, 1].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::map::{ConditionKind, ConditionMap, DEFAULT_CANNY_WEIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyConfig {
    pub low: f64,
    pub high: f64,
    pub blur_sigma: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            low: 0.1,
            high: 0.2,
            blur_sigma: 1.0,
        }
    }
}

/// Magnitudes within this of a neighbour count as ties in suppression.
const TIE: f64 = 1e-9;

fn check_gray(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::dim("canny input", s, &[0, 0])),
    }
}

/// Separable Gaussian blur with edge clamping. `sigma = 0` is the identity.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = check_gray(image)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("blur sigma must be finite and non-negative"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * src[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        (-r..=r)
            .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x])
            .sum()
    }))
}

/// Sobel gradients `(gx, gy)`, normalised so a unit ramp has slope 1.
pub fn sobel(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = check_gray(image)?;
    let d = image.data();
    let at = |y: isize, x: isize| d[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let gx = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
        let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
        (right - left) / 8.0
    });
    let gy = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let down = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
        let up = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
        (down - up) / 8.0
    });
    Ok((gx, gy))
}

/// Binary edge map: blur, Sobel, non-maximum suppression along the quantised
/// gradient direction, then hysteresis with 8-connectivity.
pub fn canny_edges(image: &Tensor, cfg: &CannyConfig) -> Result<Tensor> {
    let (h, w) = check_gray(image)?;
    if !(cfg.low >= 0.0 && cfg.low <= cfg.high) {
        return Err(Error::config(format!(
            "canny thresholds need 0 <= low <= high, got {} and {}",
            cfg.low, cfg.high
        )));
    }
    let blurred = gaussian_blur(image, cfg.blur_sigma)?;
    let (gx, gy) = sobel(&blurred)?;
    let mag: Vec<f64> = gx.data().iter().zip(gy.data()).map(|(a, b)| a.hypot(*b)).collect();
    let m = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let angle = gy.data()[i].atan2(gx.data()[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = match angle {
                a if !(22.5..157.5).contains(&a) => (0, 1),
                a if a < 67.5 => (1, 1),
                a if a < 112.5 => (1, 0),
                _ => (1, -1),
            };
            let (yi, xi) = (y as isize, x as isize);
            if v + TIE >= m(yi + dy, xi + dx) && v + TIE >= m(yi - dy, xi - dx) {
                thin[i] = v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v > 0.0 && v >= cfg.high {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] > 0.0 && thin[j] >= cfg.low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Tensor::new(&[h, w], out)
}

/// Canny condition map at the default canny weight.
pub fn canny(image: &Tensor, cfg: &CannyConfig) -> Result<ConditionMap> {
    ConditionMap::new(ConditionKind::Canny, canny_edges(image, cfg)?, DEFAULT_CANNY_WEIGHT)
}
