//! Inverts the renderer by coordinate descent on pixel MSE.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::params::{FaceParams, PARAM_DIM};
use super::render::render_image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub sweeps: usize,
    /// Damped Gauss-Newton iterations after the sweeps.
    pub refine_iters: usize,
    /// Grid points per line search (odd).
    pub grid: usize,
    /// Grid step shrink factor applied after every sweep.
    pub shrink: f64,
    /// Final MSE above which the estimate is flagged.
    pub low_confidence_mse: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            sweeps: 3,
            refine_iters: 12,
            grid: 9,
            shrink: 0.5,
            low_confidence_mse: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub params: FaceParams,
    pub mse: f64,
    pub low_confidence: bool,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Coordinate descent from the parameter-space center, polished by
/// Levenberg-Marquardt on the pixel residuals.
///
/// Each line search evaluates a grid centred on the current value, then one
/// parabolic refinement through the best point and its neighbours. Every
/// stage only accepts moves that lower the error, so a face rendered at the
/// center is recovered exactly.
pub fn estimate_params(image: &Tensor, cfg: &EstimatorConfig) -> Result<Estimate> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::dim("estimate_params", s, &[3, 64, 64]));
    }
    if cfg.grid < 3 || cfg.grid % 2 == 0 || !(cfg.shrink > 0.0 && cfg.shrink <= 1.0) {
        return Err(Error::config("estimator needs an odd grid >= 3 and shrink in (0, 1]"));
    }
    let size = s[1];
    let eval = |v: &[f64; PARAM_DIM]| -> Result<f64> {
        Ok(mse(&render_image(&FaceParams::from_slice(v)?, size)?, image))
    };
    let half = (cfg.grid / 2) as i64;
    let mut x = FaceParams::center().to_vec();
    let mut best = eval(&x)?;
    let mut step: Vec<f64> = (0..PARAM_DIM).map(|i| FaceParams::limit(i) / half as f64).collect();
    for _ in 0..cfg.sweeps {
        for i in 0..PARAM_DIM {
            let lim = FaceParams::limit(i);
            let x0 = x[i];
            let mut vals = Vec::with_capacity(cfg.grid);
            for m in -half..=half {
                let v = x0 + m as f64 * step[i];
                if v.abs() > lim + 1e-12 {
                    vals.push(None);
                    continue;
                }
                let f = if m == 0 {
                    best
                } else {
                    let mut probe = x;
                    probe[i] = v.clamp(-lim, lim);
                    eval(&probe)?
                };
                vals.push(Some(f));
            }
            let (bi, bf) = vals
                .iter()
                .enumerate()
                .filter_map(|(j, f)| f.map(|f| (j, f)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.abs_diff(half as usize).cmp(&b.0.abs_diff(half as usize))))
                .expect("center always evaluated");
            if bf < best {
                best = bf;
                x[i] = (x0 + (bi as i64 - half) as f64 * step[i]).clamp(-lim, lim);
            }
            if bi > 0 && bi + 1 < vals.len() {
                if let (Some(fm), Some(fp)) = (vals[bi - 1], vals[bi + 1]) {
                    let curv = fm - 2.0 * bf + fp;
                    if curv > 0.0 {
                        let offset = 0.5 * step[i] * (fm - fp) / curv;
                        let v = (x[i] + offset).clamp(-lim, lim);
                        if v != x[i] {
                            let mut probe = x;
                            probe[i] = v;
                            let f = eval(&probe)?;
                            if f < best {
                                best = f;
                                x = probe;
                            }
                        }
                    }
                }
            }
        }
        for st in &mut step {
            *st *= cfg.shrink;
        }
    }
    refine(&mut x, &mut best, image, size, cfg.refine_iters)?;
    Ok(Estimate {
        params: FaceParams::from_slice(&x)?,
        mse: best,
        low_confidence: best > cfg.low_confidence_mse,
    })
}

fn clamp_params(v: &mut [f64; PARAM_DIM]) {
    for (i, x) in v.iter_mut().enumerate() {
        let lim = FaceParams::limit(i);
        *x = x.clamp(-lim, lim);
    }
}

/// Levenberg-Marquardt with a forward-difference Jacobian.
fn refine(x: &mut [f64; PARAM_DIM], best: &mut f64, image: &Tensor, size: usize, iters: usize) -> Result<()> {
    if iters == 0 || *best == 0.0 {
        return Ok(());
    }
    let target = image.data();
    let n = target.len();
    let residual = |v: &[f64; PARAM_DIM]| -> Result<Vec<f64>> {
        let img = render_image(&FaceParams::from_slice(v)?, size)?;
        Ok(img.data().iter().zip(target).map(|(a, b)| a - b).collect())
    };
    let mut r = residual(x)?;
    let mut damping = 1e-3;
    let h = 1e-5;
    for _ in 0..iters {
        let mut jac = DMatrix::<f64>::zeros(n, PARAM_DIM);
        for i in 0..PARAM_DIM {
            let mut probe = *x;
            // Step inward at the bounds.
            let step = if x[i] + h > FaceParams::limit(i) { -h } else { h };
            probe[i] += step;
            let rp = residual(&probe)?;
            for (k, (a, b)) in rp.iter().zip(&r).enumerate() {
                jac[(k, i)] = (a - b) / step;
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj.clone();
            for i in 0..PARAM_DIM {
                a[(i, i)] += damping * (jtj[(i, i)] + 1e-9);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&g)) else {
                damping *= 10.0;
                continue;
            };
            let mut cand = *x;
            for i in 0..PARAM_DIM {
                cand[i] -= delta[i];
            }
            clamp_params(&mut cand);
            let rc = residual(&cand)?;
            let f = rc.iter().map(|v| v * v).sum::<f64>() / n as f64;
            if f < *best {
                *x = cand;
                *best = f;
                r = rc;
                damping = (damping * 0.3).max(1e-9);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved || *best < 1e-14 {
            break;
        }
    }
    Ok(())
}
