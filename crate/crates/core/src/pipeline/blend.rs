//! Mask feathering, compositing and the colour-matching restoration stage.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Width of the ring outside the feather band whose target statistics the
/// masked region is matched to.
pub const RING_WIDTH: usize = 3;

/// Euclidean distance from every pixel to the nearest pixel with
/// `mask > 0`; infinite when the mask is empty.
pub fn distance_to_mask(mask: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = plane_dims(mask)?;
    let inside: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.data()[i] > 0.0).map(|i| (i / w, i % w)).collect();
    Ok((0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            inside
                .iter()
                .map(|&(my, mx)| (y as f64 - my as f64).powi(2) + (x as f64 - mx as f64).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

fn plane_dims(mask: &Tensor) -> Result<(usize, usize)> {
    match mask.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::dim("mask", s, &[0, 0])),
    }
}

/// 1 on the mask, a linear ramp down over `feather` pixels outside it, and
/// exactly 0 beyond.
pub fn feather_mask(mask: &Tensor, feather: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(mask)?;
    let d = distance_to_mask(mask)?;
    let f = feather as f64 + 1.0;
    Ok(Tensor::from_fn(&[h, w], |i| {
        if mask.data()[i] > 0.0 {
            1.0
        } else if feather == 0 {
            0.0
        } else {
            (1.0 - d[i] / f).max(0.0)
        }
    }))
}

/// `w ⊙ generated + (1 − w) ⊙ target` with `w` broadcast over channels.
pub fn composite(generated: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    generated.same_shape(target, "composite")?;
    let s = target.shape();
    if s.len() != 3 || weights.shape() != &s[1..] {
        return Err(Error::dim("composite weights", weights.shape(), &s[1..]));
    }
    let hw = s[1] * s[2];
    let (g, t, wd) = (generated.data(), target.data(), weights.data());
    Ok(Tensor::from_fn(s, |i| {
        let w = wd[i % hw];
        w * g[i] + (1.0 - w) * t[i]
    }))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mu = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Feathers the seam and matches the per-channel mean and standard
/// deviation of the masked region to the target's ring just outside the
/// feather band. `feather = 0` returns the composite unchanged.
pub fn blend_restore(composite: &Tensor, target: &Tensor, mask: &Tensor, feather: usize) -> Result<Tensor> {
    composite.same_shape(target, "blend_restore")?;
    let s = target.shape();
    if s.len() != 3 || mask.shape() != &s[1..] {
        return Err(Error::dim("blend_restore mask", mask.shape(), &s[1..]));
    }
    if feather == 0 {
        return Ok(composite.clone());
    }
    let hw = s[1] * s[2];
    let d = distance_to_mask(mask)?;
    let masked: Vec<usize> = (0..hw).filter(|&i| mask.data()[i] > 0.0).collect();
    let lo = feather as f64 + 1.0;
    let ring: Vec<usize> = (0..hw).filter(|&i| d[i] >= lo && d[i] < lo + RING_WIDTH as f64).collect();
    if masked.is_empty() || ring.is_empty() {
        return Ok(composite.clone());
    }
    let weights = feather_mask(mask, feather)?;
    let (c, t) = (composite.data(), target.data());
    let mut out = composite.clone();
    for ch in 0..s[0] {
        let base = ch * hw;
        let (mu_m, sd_m) = mean_std(masked.iter().map(|&i| c[base + i]));
        let (mu_r, sd_r) = mean_std(ring.iter().map(|&i| t[base + i]));
        let gain = if sd_m > 1e-12 { sd_r / sd_m } else { 1.0 };
        let o = out.data_mut();
        for i in 0..hw {
            let w = weights.data()[i];
            if w == 0.0 {
                continue;
            }
            let v = c[base + i];
            let moved = (v - mu_m) * gain + mu_r;
            o[base + i] = w * moved + (1.0 - w) * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn square_mask(n: usize, lo: usize, hi: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| {
            let (y, x) = (i / n, i % n);
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn feather_ramp_values() {
        let m = square_mask(16, 6, 10);
        let f = feather_mask(&m, 3).unwrap();
        assert_eq!(f.data()[8 * 16 + 8], 1.0);
        assert_eq!(f.data()[8 * 16 + 10], 0.75);
        assert_eq!(f.data()[8 * 16 + 12], 0.25);
        assert_eq!(f.data()[8 * 16 + 13], 0.0);
        assert_eq!(feather_mask(&m, 0).unwrap(), m);
    }

    #[test]
    fn feather_zero_on_identical_images_is_a_no_op() {
        let t = Rng::new(1).uniform_tensor(&[3, 16, 16], 0.0, 1.0);
        let m = square_mask(16, 4, 12);
        assert_eq!(blend_restore(&t, &t, &m, 0).unwrap(), t);
    }

    #[test]
    fn constant_fill_takes_ring_mean() {
        let n = 24;
        let target = Rng::new(2).uniform_tensor(&[3, n, n], 0.0, 1.0);
        let m = square_mask(n, 8, 16);
        let filled = Tensor::from_fn(&[3, n, n], |i| if m.data()[i % (n * n)] > 0.0 { 0.9 } else { target.data()[i] });
        let out = blend_restore(&filled, &target, &m, 2).unwrap();
        let d = distance_to_mask(&m).unwrap();
        for ch in 0..3 {
            let base = ch * n * n;
            let ring: Vec<f64> = (0..n * n).filter(|&i| d[i] >= 3.0 && d[i] < 6.0).map(|i| target.data()[base + i]).collect();
            let mu = ring.iter().sum::<f64>() / ring.len() as f64;
            let inside: Vec<f64> = (0..n * n).filter(|&i| m.data()[i] > 0.0).map(|i| out.data()[base + i]).collect();
            let got = inside.iter().sum::<f64>() / inside.len() as f64;
            assert!((got - mu).abs() < 1e-9, "{got} vs {mu}");
        }
    }

    #[test]
    fn pixels_beyond_the_band_are_untouched() {
        let n = 20;
        let mut rng = Rng::new(3);
        let (gen, target) = (rng.uniform_tensor(&[3, n, n], 0.0, 1.0), rng.uniform_tensor(&[3, n, n], 0.0, 1.0));
        let m = square_mask(n, 7, 13);
        let w = feather_mask(&m, 3).unwrap();
        let c = composite(&gen, &target, &w).unwrap();
        let out = blend_restore(&c, &target, &m, 3).unwrap();
        for i in 0..3 * n * n {
            if w.data()[i % (n * n)] == 0.0 {
                assert_eq!(out.data()[i].to_bits(), target.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn empty_mask_composites_to_target() {
        let mut rng = Rng::new(4);
        let (gen, target) = (rng.uniform_tensor(&[3, 8, 8], 0.0, 1.0), rng.uniform_tensor(&[3, 8, 8], 0.0, 1.0));
        let m = Tensor::zeros(&[8, 8]);
        let c = composite(&gen, &target, &feather_mask(&m, 3).unwrap()).unwrap();
        assert_eq!(blend_restore(&c, &target, &m, 3).unwrap(), target);
    }
}
