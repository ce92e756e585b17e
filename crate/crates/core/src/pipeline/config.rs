use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{CannyConfig, DEFAULT_ANNOTATION_WEIGHT, DEFAULT_CANNY_WEIGHT};
use crate::customization::CustomizationConfig;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::faceworld::EstimatorConfig;
use crate::guidance::GuidanceConfig;

/// Everything a swap needs. `seed` drives the sampler and the inpainting
/// noise; `sampler.seed` is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapConfig {
    pub customization: CustomizationConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub canny: CannyConfig,
    pub canny_weight: f64,
    pub annotation_weight: f64,
    /// Image-prompt adapter scale λ at inference.
    pub adapter_scale: f64,
    pub mask_dilation: usize,
    pub feather: usize,
    pub prompt: String,
    /// Hidden width of the control encoders.
    pub control_hidden: usize,
    pub control_seed: u64,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

impl Default for SwapConfig {
    fn default() -> Self {
        SwapConfig {
            customization: CustomizationConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            canny: CannyConfig::default(),
            canny_weight: DEFAULT_CANNY_WEIGHT,
            annotation_weight: DEFAULT_ANNOTATION_WEIGHT,
            adapter_scale: 0.6,
            mask_dilation: 2,
            feather: 3,
            prompt: "a photo of sks person".into(),
            control_hidden: 8,
            control_seed: 0xc0_7201,
            estimator: EstimatorConfig::default(),
            seed: 0x5_3a9,
        }
    }
}

impl SwapConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.customization.validate()?;
        self.sampler.validate(sched)?;
        self.guidance.validate(self.sampler.num_steps)?;
        for (name, w) in [
            ("canny_weight", self.canny_weight),
            ("annotation_weight", self.annotation_weight),
            ("adapter_scale", self.adapter_scale),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.canny.low >= 0.0 && self.canny.low <= self.canny.high) {
            return Err(Error::config("canny thresholds need 0 <= low <= high"));
        }
        if self.control_hidden == 0 {
            return Err(Error::config("control_hidden must be positive"));
        }
        let token = &self.customization.identity_token;
        if !self.prompt.split_whitespace().any(|t| t == token) {
            return Err(Error::config(format!("prompt {:?} lacks the identity token {token:?}", self.prompt)));
        }
        Ok(())
    }

    /// Reads a JSON config; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
