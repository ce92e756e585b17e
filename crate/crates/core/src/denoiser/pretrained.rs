//! The standard "pretrained" face denoiser: a Gaussian prior fitted to
//! rendered faces plus a seeded network.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::faceworld::{render_image, FaceParams};
use crate::numerics::{Rng, Tensor};

use super::config::DenoiserConfig;
use super::model::Denoiser;
use super::prior::GaussianPrior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Number of rendered training faces.
    pub count: usize,
    pub components: usize,
    pub resid_scale: f64,
    pub min_var: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            count: 256,
            components: 24,
            resid_scale: 1.0,
            min_var: 1e-4,
            seed: 0xfa_ce5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.components == 0 {
            return Err(Error::config("prior needs at least two faces and one component"));
        }
        if !(self.resid_scale > 0.0 && self.min_var > 0.0) {
            return Err(Error::config("prior variances must be positive"));
        }
        Ok(())
    }
}

/// Faces drawn uniformly from the parameter space.
pub fn training_faces(cfg: &PriorConfig, size: usize) -> Result<Vec<Tensor>> {
    let mut rng = Rng::with_stream(cfg.seed, 0xda7a);
    (0..cfg.count).map(|_| render_image(&FaceParams::random(&mut rng), size)).collect()
}

impl Denoiser {
    /// Fits the prior on rendered faces and initializes the network.
    pub fn pretrained(config: DenoiserConfig, prior_cfg: &PriorConfig) -> Result<Self> {
        config.validate()?;
        prior_cfg.validate()?;
        let [_, h, w] = config.latent_shape();
        if h != w {
            return Err(Error::config("face denoiser needs a square latent"));
        }
        let faces = training_faces(prior_cfg, h)?;
        let prior = GaussianPrior::fit(&faces, prior_cfg.components, prior_cfg.resid_scale, prior_cfg.min_var)?;
        Denoiser::new(config, Arc::new(prior), NoiseSchedule::standard())
    }

    /// The default denoiser, built once per process.
    pub fn standard() -> Arc<Denoiser> {
        static MODEL: OnceLock<Arc<Denoiser>> = OnceLock::new();
        MODEL
            .get_or_init(|| {
                Arc::new(
                    Denoiser::pretrained(DenoiserConfig::default(), &PriorConfig::default())
                        .expect("standard denoiser"),
                )
            })
            .clone()
    }
}
