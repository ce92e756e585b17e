//! The face parser F_P: a fixed three-layer convolutional network with a
//! softmax over the six classes at every pixel.
//!
//! The first two layers are random (seeded) feature extractors. The final
//! 1×1 layer reads `[input, layer 1, layer 2]` and is fitted once, by least
//! squares on centred log class scores of rendered faces, followed by a
//! temperature search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

use super::params::FaceParams;
use super::render::{render_face, ParseMap, NUM_CLASSES};

const HIDDEN: usize = 8;
const FEATURES: usize = 3 + 2 * HIDDEN;

#[derive(Clone, Debug)]
pub struct FaceParser {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl FaceParser {
    /// Random feature layers and a zero read-out.
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut conv = |o: usize, i: usize, k: usize, gain: f64| {
            let std = gain / ((i * k * k) as f64).sqrt();
            rng.normal_tensor(&[o, i, k, k]).scale(std)
        };
        let w1 = conv(HIDDEN, 3, 3, 6.0);
        let w2 = conv(HIDDEN, HIDDEN, 3, 2.0);
        let mut rng = Rng::with_stream(seed, 1);
        FaceParser {
            w1,
            b1: rng.uniform_tensor(&[HIDDEN], -3.0, 3.0),
            w2,
            b2: rng.uniform_tensor(&[HIDDEN], -1.0, 1.0),
            w3: Tensor::zeros(&[NUM_CLASSES, FEATURES, 1, 1]),
            b3: Tensor::zeros(&[NUM_CLASSES]),
        }
    }

    /// Random features plus the fitted read-out over `faces` rendered faces.
    pub fn calibrated(seed: u64, faces: usize, size: usize) -> Result<Self> {
        let mut parser = Self::random(seed);
        let mut rng = Rng::with_stream(seed, 2);
        let set: Vec<_> = (0..faces)
            .map(|_| render_face(&FaceParams::random(&mut rng), size))
            .collect::<Result<_>>()?;
        parser.fit_readout(&set.iter().map(|r| (r.image.clone(), r.parse.clone())).collect::<Vec<_>>())?;
        Ok(parser)
    }

    fn features<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let h1 = x.conv2d(w1, Some(b1), 1)?.silu();
        let h2 = h1.conv2d(w2, Some(b2), 2)?.silu();
        Var::concat0(&[x, h1, h2])
    }

    /// Differentiable soft parse `[L, H, W]` of a `[3, H, W]` image.
    pub fn forward<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("parse_face", &s, &[3, 0, 0]));
        }
        let f = self.features(tape, image)?;
        let w3 = tape.constant(self.w3.clone());
        let b3 = tape.constant(self.b3.clone());
        f.conv2d(w3, Some(b3), 1)?.softmax(0)
    }

    pub fn parse(&self, image: &Tensor) -> Result<ParseMap> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        ParseMap::new(self.forward(&tape, x)?.tensor())
    }

    fn fit_readout(&mut self, set: &[(Tensor, ParseMap)]) -> Result<()> {
        if set.is_empty() {
            return Err(Error::config("parser calibration needs at least one face"));
        }
        let d = FEATURES + 1;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DMatrix::<f64>::zeros(d, NUM_CLASSES);
        let mut feats = Vec::with_capacity(set.len());
        for (img, gt) in set {
            let tape = Tape::new();
            let f = self.features(&tape, tape.constant(img.clone()))?.tensor();
            let hw = gt.height() * gt.width();
            let fd = f.data();
            let mut row = vec![0.0; d];
            for p in 0..hw {
                for j in 0..FEATURES {
                    row[j] = fd[j * hw + p];
                }
                row[FEATURES] = 1.0;
                let logs: Vec<f64> = (0..NUM_CLASSES).map(|k| (gt.plane(k)[p] + 1e-3).ln()).collect();
                let mean = logs.iter().sum::<f64>() / NUM_CLASSES as f64;
                for a in 0..d {
                    for b in a..d {
                        gram[(a, b)] += row[a] * row[b];
                    }
                    for k in 0..NUM_CLASSES {
                        rhs[(a, k)] += row[a] * (logs[k] - mean);
                    }
                }
            }
            feats.push(f);
        }
        for a in 0..d {
            gram[(a, a)] += 1e-6;
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let sol = gram
            .cholesky()
            .ok_or_else(|| Error::contract("parser calibration system is singular"))?
            .solve(&rhs);

        // Temperature: maximise the mean log-likelihood of the soft targets.
        let mut best = (f64::NEG_INFINITY, 1.0);
        for i in 0..=24 {
            let temp = 0.25 * 1.12f64.powi(i);
            let mut ll = 0.0;
            for (f, (_, gt)) in feats.iter().zip(set) {
                let hw = gt.height() * gt.width();
                let fd = f.data();
                for p in (0..hw).step_by(3) {
                    let x = DVector::from_fn(d, |j, _| if j < FEATURES { fd[j * hw + p] } else { 1.0 });
                    let z: Vec<f64> = (0..NUM_CLASSES).map(|k| temp * sol.column(k).dot(&x)).collect();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    ll += (0..NUM_CLASSES).map(|k| gt.plane(k)[p] * (z[k] - lse)).sum::<f64>();
                }
            }
            if ll > best.0 {
                best = (ll, temp);
            }
        }
        let temp = best.1;
        self.w3 = Tensor::from_fn(&[NUM_CLASSES, FEATURES, 1, 1], |i| temp * sol[(i % FEATURES, i / FEATURES)]);
        self.b3 = Tensor::from_fn(&[NUM_CLASSES], |k| temp * sol[(FEATURES, k)]);
        Ok(())
    }
}

/// Mean fraction of pixels whose most likely class agrees with the ground truth.
pub fn agreement(pred: &ParseMap, truth: &ParseMap) -> f64 {
    let (a, b) = (pred.argmax(), truth.argmax());
    a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    #[test]
    fn scores_sum_to_one() {
        let p = FaceParser::random(3);
        let img = Rng::new(1).uniform_tensor(&[3, 16, 16], 0.0, 1.0);
        let mut parser = p.clone();
        parser.w3 = Rng::new(2).normal_tensor(&[NUM_CLASSES, FEATURES, 1, 1]);
        let map = parser.parse(&img).unwrap();
        for i in 0..256 {
            let s: f64 = (0..NUM_CLASSES).map(|k| map.plane(k)[i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut parser = FaceParser::random(5);
        parser.w3 = Rng::new(6).normal_tensor(&[NUM_CLASSES, FEATURES, 1, 1]);
        let weights = Rng::new(7).normal_tensor(&[NUM_CLASSES, 6, 6]);
        let mut rng = Rng::new(8);
        for _ in 0..3 {
            let img = rng.uniform_tensor(&[3, 6, 6], 0.0, 1.0);
            let err = check_gradient(
                |tape, x| {
                    let w = tape.constant(weights.clone());
                    Ok(parser.forward(tape, x)?.mul(w)?.sum())
                },
                &img,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}
