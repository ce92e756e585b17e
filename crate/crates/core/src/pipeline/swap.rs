use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{canny, control_forward, render_annotation, ConditionMap, ControlParams, Landmarks};
use crate::customization::{build_prior_set, train_lora_with_prior, IdentityAdapter, TrainReport};
use crate::denoiser::{AdaptedDenoiser, Denoiser};
use crate::diffusion::{sample, Hooks, MaskedBlend, SamplerConfig};
use crate::error::{Error, Result, StageExt};
use crate::faceworld::{face_mask, grayscale, FaceWorld};
use crate::guidance::{facial_guidance_loss, FacialGuidance, GuidanceTrace, GuidedDenoiser, MaskedFeatures, SemanticFeatures};
use crate::numerics::{Rng, Tensor};

use super::blend::{blend_restore, composite, feather_mask};
use super::config::SwapConfig;
use super::metrics::{cosine_id, param_l1, ParamDistances};

/// Frozen models shared by every swap.
#[derive(Clone)]
pub struct SwapContext {
    pub world: Arc<FaceWorld>,
    pub denoiser: Arc<Denoiser>,
    pub control: ControlParams,
}

impl SwapContext {
    pub fn new(world: Arc<FaceWorld>, denoiser: Arc<Denoiser>, cfg: &SwapConfig) -> Self {
        let control = ControlParams::init(denoiser.config(), cfg.control_hidden, cfg.control_seed);
        SwapContext { world, denoiser, control }
    }

    /// The standard face world and pretrained denoiser.
    pub fn standard(cfg: &SwapConfig) -> Self {
        Self::new(FaceWorld::standard(), Denoiser::standard(), cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapMetrics {
    pub cos_source: f64,
    pub cos_target: f64,
    /// Parameter distances of the output to the target.
    pub to_target: ParamDistances,
    /// `L_p` of the output against the target.
    pub final_lp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwapReport {
    #[serde(skip)]
    pub output: Tensor,
    #[serde(skip)]
    pub conditions: Vec<ConditionMap>,
    #[serde(skip)]
    pub mask: Tensor,
    pub guidance: GuidanceTrace,
    pub metrics: SwapMetrics,
    pub adapter_checksum: u64,
    pub output_checksum: u64,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl SwapReport {
    /// Everything but the timings, for reproducibility checks.
    pub fn same_result(&self, other: &SwapReport) -> bool {
        self.output == other.output
            && self.conditions == other.conditions
            && self.mask == other.mask
            && self.guidance == other.guidance
            && self.metrics == other.metrics
            && self.adapter_checksum == other.adapter_checksum
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Stopwatch {
    timings: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().stage(stage);
        *self.timings.entry(stage.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}

fn check_inputs(ctx: &SwapContext, source: &Tensor, target: &Tensor) -> Result<()> {
    let want = ctx.denoiser.config().latent_shape();
    for (what, im) in [("source", source), ("target", target)] {
        if im.shape() != want {
            return Err(Error::dim(if what == "source" { "swap source" } else { "swap target" }, im.shape(), &want));
        }
    }
    Ok(())
}

/// Trains the identity adapter for `source`.
pub fn train_identity(ctx: &SwapContext, source: &Tensor, cfg: &SwapConfig) -> Result<(IdentityAdapter, TrainReport)> {
    let c = &cfg.customization;
    let prior = build_prior_set(&ctx.denoiser, &c.class_prompt, c.prior_count, &c.prior_sampler)?;
    train_lora_with_prior(&ctx.denoiser, source, &prior, c)
}

/// Canny and annotation maps of the target at the configured weights.
pub fn condition_maps(target: &Tensor, landmarks: &Landmarks, cfg: &SwapConfig) -> Result<Vec<ConditionMap>> {
    let s = target.shape();
    let edges = canny(&grayscale(target)?, &cfg.canny)?.with_weight(cfg.canny_weight)?;
    let ann = render_annotation(landmarks, s[1], s[2])?.with_weight(cfg.annotation_weight)?;
    Ok(vec![edges, ann])
}

/// Full swap: customize on `source`, then [`swap_with_adapter`].
pub fn swap(ctx: &SwapContext, source: &Tensor, target: &Tensor, landmarks: &Landmarks, cfg: &SwapConfig) -> Result<SwapReport> {
    cfg.validate(ctx.denoiser.schedule())?;
    check_inputs(ctx, source, target)?;
    let t0 = Instant::now();
    let (adapter, _) = train_identity(ctx, source, cfg).stage("customize")?;
    let train_secs = t0.elapsed().as_secs_f64();
    let mut report = swap_with_adapter(ctx, &adapter, source, target, landmarks, cfg)?;
    report.timings.insert("customize".into(), train_secs);
    Ok(report)
}

/// Conditions on the target, samples with guidance and inpainting, then
/// composites and blends into the target.
pub fn swap_with_adapter(
    ctx: &SwapContext,
    adapter: &IdentityAdapter,
    source: &Tensor,
    target: &Tensor,
    landmarks: &Landmarks,
    cfg: &SwapConfig,
) -> Result<SwapReport> {
    cfg.validate(ctx.denoiser.schedule())?;
    check_inputs(ctx, source, target)?;
    let d = &*ctx.denoiser;
    adapter.check(d).stage("customize")?;
    let s = target.shape();
    let mut sw = Stopwatch { timings: BTreeMap::new() };

    let conditions = sw.run("conditions", || condition_maps(target, landmarks, cfg))?;
    let residuals = sw.run("conditions", || control_forward(&conditions, &ctx.control))?;
    let mask = sw.run("mask", || face_mask(landmarks, s[1], s[2], cfg.mask_dilation))?;

    let (generated, trace) = sw.run("sample", || {
        let mut cond = adapter.condition(d, &cfg.prompt, Some(source), cfg.adapter_scale)?;
        cond.control_residuals = Some(residuals.clone());
        let sampler = SamplerConfig {
            seed: cfg.seed,
            ..cfg.sampler.clone()
        };
        let guided = GuidedDenoiser {
            denoiser: d,
            lora: Some(&adapter.lora),
            cfg_scale: sampler.cfg_scale,
        };
        let masked;
        let features: &dyn SemanticFeatures = if cfg.guidance.masked_loss {
            masked = MaskedFeatures::new(&ctx.world.parser, &mask, target)?;
            &masked
        } else {
            &ctx.world.parser
        };
        let mut guidance = FacialGuidance::new(
            guided,
            features,
            target,
            cfg.guidance.clone(),
            sampler.num_steps,
            d.schedule().clone(),
        )?;
        let mut blend = MaskedBlend {
            target: target.clone(),
            mask: mask.clone(),
            rng: Rng::with_stream(cfg.seed, 0x1b),
        };
        let model = AdaptedDenoiser {
            denoiser: d,
            lora: Some(&adapter.lora),
        };
        let hooks = Hooks {
            guidance: Some(&mut guidance),
            inpaint: Some(&mut blend),
        };
        let x = sample(&model, &cond, &sampler, d.schedule(), hooks)?;
        Ok((x.map(|v| v.clamp(0.0, 1.0)), guidance.trace))
    })?;

    let output = sw.run("blend", || {
        let weights = feather_mask(&mask, cfg.feather)?;
        let c = composite(&generated, target, &weights)?;
        Ok(blend_restore(&c, target, &mask, cfg.feather)?.map(|v| v.clamp(0.0, 1.0)))
    })?;

    let metrics = sw.run("metrics", || {
        Ok(SwapMetrics {
            cos_source: cosine_id(&ctx.world, &output, source)?,
            cos_target: cosine_id(&ctx.world, &output, target)?,
            to_target: param_l1(&output, target, &cfg.estimator)?,
            final_lp: facial_guidance_loss(&output, target, &ctx.world.parser)?,
        })
    })?;

    Ok(SwapReport {
        output_checksum: output.fingerprint(),
        output,
        conditions,
        mask,
        guidance: trace,
        metrics,
        adapter_checksum: adapter.checksum(),
        timings: sw.timings,
    })
}
