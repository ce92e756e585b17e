//! Identity cosine and expression / pose / shape parameter distances.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::faceworld::{estimate_params, Estimate, EstimatorConfig, FaceParams, FaceWorld};
use crate::numerics::Tensor;

/// Cosine of the identity embeddings of two images.
pub fn cosine_id(world: &FaceWorld, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ea, eb) = (world.embed_id(a)?, world.embed_id(b)?);
    Ok(ea.dot(&eb)?.clamp(-1.0, 1.0))
}

/// Mean absolute differences per parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamDistances {
    pub expr: f64,
    pub pose: f64,
    pub shape: f64,
    /// Either estimate fitted poorly.
    pub low_confidence: bool,
}

fn group_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn params_l1(a: &FaceParams, b: &FaceParams) -> ParamDistances {
    ParamDistances {
        expr: group_l1(&a.expression, &b.expression),
        pose: group_l1(&a.pose, &b.pose),
        shape: group_l1(&a.identity, &b.identity),
        low_confidence: false,
    }
}

pub fn estimates_l1(a: &Estimate, b: &Estimate) -> ParamDistances {
    ParamDistances {
        low_confidence: a.low_confidence || b.low_confidence,
        ..params_l1(&a.params, &b.params)
    }
}

/// Fits the face model to both images and compares parameter groups; the
/// identity group stands for shape.
pub fn param_l1(a: &Tensor, b: &Tensor, cfg: &EstimatorConfig) -> Result<ParamDistances> {
    Ok(estimates_l1(&estimate_params(a, cfg)?, &estimate_params(b, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faceworld::render_image;
    use crate::numerics::Rng;

    #[test]
    fn same_image_is_zero_and_symmetric() {
        let w = FaceWorld::standard();
        let mut rng = Rng::new(3);
        let a = render_image(&FaceParams::random(&mut rng), 64).unwrap();
        let b = render_image(&FaceParams::random(&mut rng), 64).unwrap();
        assert!((cosine_id(&w, &a, &a).unwrap() - 1.0).abs() < 1e-12);
        let cfg = EstimatorConfig::default();
        let z = param_l1(&a, &a, &cfg).unwrap();
        assert_eq!((z.expr, z.pose, z.shape), (0.0, 0.0, 0.0));
        assert_eq!(param_l1(&a, &b, &cfg).unwrap(), param_l1(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn single_expression_offset() {
        let mut rng = Rng::new(8);
        let mut p = FaceParams::random(&mut rng);
        p.expression[1] = -0.4;
        let mut q = p;
        q.expression[1] = 0.4;
        let cfg = EstimatorConfig::default();
        let d = param_l1(&render_image(&p, 64).unwrap(), &render_image(&q, 64).unwrap(), &cfg).unwrap();
        assert!((d.expr - 0.8 / 4.0).abs() < 0.05, "{d:?}");
        assert!(d.pose < 0.05 && d.shape < 0.05, "{d:?}");
    }
}
