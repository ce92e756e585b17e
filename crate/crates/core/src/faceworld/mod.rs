//! A synthetic face universe with known ground truth: renderer, face masks,
//! a differentiable parser, an identity embedder and a parameter estimator.

mod embed;
mod estimate;
mod mask;
mod params;
mod parser;
mod render;

use std::sync::{Arc, OnceLock};

pub use embed::{face_stats, IdentityEmbedder, EMBED_DIM, NUM_STATS};
pub use estimate::{estimate_params, Estimate, EstimatorConfig};
pub use mask::{convex_hull, dilate, face_mask};
pub use params::{
    FaceParams, EXPRESSION_DIM, EXPRESSION_NAMES, IDENTITY_DIM, IDENTITY_NAMES, PARAM_DIM, POSE_DIM, POSE_LIMIT,
    POSE_NAMES,
};
pub use parser::{agreement, FaceParser};
pub use render::{
    grayscale, render_face, render_image, ParseMap, Rendered, BACKGROUND, BROWS, CLASS_NAMES, EYES, MOUTH, NOSE,
    NUM_CLASSES, SKIN,
};

use crate::error::Result;
use crate::numerics::{Rng, Tensor};

pub const DEFAULT_SIZE: usize = 64;
pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

/// Calibrated parser and embedder for one image size.
#[derive(Clone, Debug)]
pub struct FaceWorld {
    pub size: usize,
    pub parser: FaceParser,
    pub embedder: IdentityEmbedder,
}

impl FaceWorld {
    pub fn new(seed: u64, size: usize) -> Result<Self> {
        let parser = FaceParser::calibrated(seed, 50, size)?;
        let embedder = IdentityEmbedder::calibrate(&parser, seed, 60, 4, size)?;
        Ok(FaceWorld { size, parser, embedder })
    }

    /// The shared 64×64 world, built once per process.
    pub fn standard() -> Arc<FaceWorld> {
        static WORLD: OnceLock<Arc<FaceWorld>> = OnceLock::new();
        WORLD
            .get_or_init(|| Arc::new(FaceWorld::new(DEFAULT_SEED, DEFAULT_SIZE).expect("standard face world")))
            .clone()
    }

    /// F_P.
    pub fn parse_face(&self, image: &Tensor) -> Result<ParseMap> {
        self.parser.parse(image)
    }

    pub fn embed_id(&self, image: &Tensor) -> Result<Tensor> {
        self.embedder.embed(&self.parser, image)
    }

    /// Mean embedding cosine over `pairs` same-identity pairs (expression
    /// and pose redrawn) and over `pairs` pairs of unrelated faces.
    pub fn identity_separation(&self, pairs: usize, seed: u64) -> Result<(f64, f64)> {
        let mut rng = Rng::with_stream(seed, 0x1d);
        let embed = |p: &FaceParams| self.embed_id(&render_image(p, self.size)?);
        let (mut same, mut cross) = (0.0, 0.0);
        for _ in 0..pairs {
            let p = FaceParams::random(&mut rng);
            let mut q = p;
            q.randomize_expression(&mut rng);
            q.randomize_pose(&mut rng);
            let other = FaceParams::random(&mut rng);
            let e = embed(&p)?;
            same += e.dot(&embed(&q)?)?;
            cross += e.dot(&embed(&other)?)?;
        }
        let n = pairs.max(1) as f64;
        Ok((same / n, cross / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let w = FaceWorld::standard();
        let x = render_image(&FaceParams::random(&mut Rng::new(5)), DEFAULT_SIZE).unwrap();
        let (a, b) = (w.embed_id(&x).unwrap(), w.embed_id(&x).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), EMBED_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identities_separate_on_a_small_sample() {
        let (same, cross) = FaceWorld::standard().identity_separation(10, 2).unwrap();
        assert!(same >= 0.9 && cross <= 0.5, "same {same} cross {cross}");
    }

    #[test]
    fn estimator_recovers_render_parameters() {
        let mut rng = Rng::new(21);
        for _ in 0..2 {
            let p = FaceParams::random(&mut rng);
            let est = estimate_params(&render_image(&p, DEFAULT_SIZE).unwrap(), &EstimatorConfig::default()).unwrap();
            for (i, (a, b)) in p.to_vec().iter().zip(est.params.to_vec()).enumerate() {
                assert!((a - b).abs() <= 0.05, "{} off by {}", FaceParams::component_name(i), (a - b).abs());
            }
        }
    }
}
