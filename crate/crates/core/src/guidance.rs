//! Facial guidance: during sampling, descend the face-parsing loss of the
//! predicted clean image with respect to the conditional text embedding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningBundle, Denoiser, LoraParams, LoraVars};
use crate::diffusion::{GuidanceHook, NoiseSchedule, SampleState};
use crate::error::{Error, Result};
use crate::faceworld::FaceParser;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    /// Sampler step indices to guide; `None` is the middle third.
    pub steps_active: Option<BTreeSet<usize>>,
    pub inner_iters: usize,
    pub step_size: f64,
    /// Skip the update once `L_p` is at or below this.
    pub stop_loss: f64,
    pub max_halvings: usize,
    /// Score `x̂0` pasted into the target outside the face mask, as the
    /// final composite will be, instead of the raw prediction.
    pub masked_loss: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            enabled: true,
            steps_active: None,
            inner_iters: 1,
            step_size: 0.05,
            stop_loss: 0.0,
            max_halvings: 5,
            masked_loss: true,
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        GuidanceConfig {
            enabled: false,
            ..Self::default()
        }
    }

    /// Guided step indices for a sampler with `num_steps` steps.
    pub fn active_steps(&self, num_steps: usize) -> BTreeSet<usize> {
        if !self.enabled {
            return BTreeSet::new();
        }
        match &self.steps_active {
            Some(s) => s.clone(),
            None => middle_third(num_steps),
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("guidance step_size must be positive"));
        }
        if !(self.stop_loss >= 0.0) {
            return Err(Error::config("guidance stop_loss must be non-negative"));
        }
        if let Some(bad) = self.steps_active.as_ref().and_then(|s| s.iter().find(|&&i| i >= num_steps)) {
            return Err(Error::config(format!(
                "guidance step {bad} outside the {num_steps} sampler steps"
            )));
        }
        Ok(())
    }
}

/// `[n/3, 2n/3)` with rounding down at both ends.
pub fn middle_third(num_steps: usize) -> BTreeSet<usize> {
    (num_steps / 3..2 * num_steps / 3).collect()
}

/// One guided inner iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEntry {
    pub step: usize,
    pub t: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Step size actually applied; zero when every halving failed.
    pub step_size: f64,
    pub halvings: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub entries: Vec<GuidanceEntry>,
}

impl GuidanceTrace {
    pub fn is_monotone(&self) -> bool {
        self.entries.iter().all(|e| e.loss_after <= e.loss_before)
    }
}

/// A differentiable semantic feature map of an image.
pub trait SemanticFeatures {
    fn features<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>>;
}

impl SemanticFeatures for FaceParser {
    fn features<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        self.forward(tape, image)
    }
}

/// Identity features, for tests and toy problems.
pub struct RawPixels;

impl SemanticFeatures for RawPixels {
    fn features<'t>(&self, _tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        Ok(image)
    }
}

/// Features of `mask⊙x + (1−mask)⊙background`.
pub struct MaskedFeatures<'a, F: SemanticFeatures + ?Sized> {
    pub inner: &'a F,
    mask: Tensor,
    known: Tensor,
}

impl<'a, F: SemanticFeatures + ?Sized> MaskedFeatures<'a, F> {
    /// `mask` is `[H, W]` or the full image shape, with values in `[0, 1]`.
    pub fn new(inner: &'a F, mask: &Tensor, background: &Tensor) -> Result<Self> {
        let shape = background.shape();
        let mask = if mask.shape() == shape {
            mask.clone()
        } else if shape.len() == 3 && mask.shape() == &shape[1..] {
            let plane = mask.data();
            Tensor::new(shape, (0..shape[0]).flat_map(|_| plane.iter().copied()).collect())?
        } else {
            return Err(Error::dim("masked guidance features", mask.shape(), shape));
        };
        if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::contract("mask values must lie in [0, 1]"));
        }
        let known = mask.map(|m| 1.0 - m).mul(background)?;
        Ok(MaskedFeatures { inner, mask, known })
    }
}

impl<F: SemanticFeatures + ?Sized> SemanticFeatures for MaskedFeatures<'_, F> {
    fn features<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let x = image.mul(tape.constant(self.mask.clone()))?.add(tape.constant(self.known.clone()))?;
        self.inner.features(tape, x)
    }
}

/// `‖target_features − F(x̂0)‖²` on the tape.
pub fn guidance_loss_var<'t, F: SemanticFeatures + ?Sized>(
    tape: &'t Tape,
    x0_pred: Var<'t>,
    target_features: &Tensor,
    features: &F,
) -> Result<Var<'t>> {
    let f = features.features(tape, x0_pred)?;
    if f.shape() != target_features.shape() {
        return Err(Error::dim("facial guidance loss", &f.shape(), target_features.shape()));
    }
    Ok(f.sub(tape.constant(target_features.clone()))?.square().sum())
}

/// `L_p = ‖F_P(x_targ) − F_P(x̂0)‖²`, summed over the parser's output map.
pub fn facial_guidance_loss<F: SemanticFeatures + ?Sized>(x0_pred: &Tensor, x_targ: &Tensor, features: &F) -> Result<f64> {
    if x0_pred.shape() != x_targ.shape() {
        return Err(Error::dim("facial guidance loss", x0_pred.shape(), x_targ.shape()));
    }
    let tape = Tape::new();
    let target = features.features(&tape, tape.constant(x_targ.clone()))?.tensor();
    Ok(guidance_loss_var(&tape, tape.constant(x0_pred.clone()), &target, features)?.item())
}

/// An ε predictor whose conditioning carries an optimisable text embedding.
pub trait TextConditioned {
    type Cond;
    fn text<'c>(&self, cond: &'c Self::Cond) -> &'c Tensor;
    fn set_text(&self, cond: &mut Self::Cond, text: Tensor);
    fn eps_with_text<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: usize, text: Var<'t>, cond: &Self::Cond) -> Result<Var<'t>>;
}

/// The denoiser with optional adapters at a fixed CFG scale.
pub struct GuidedDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub lora: Option<&'a LoraParams>,
    pub cfg_scale: f64,
}

impl TextConditioned for GuidedDenoiser<'_> {
    type Cond = ConditioningBundle;

    fn text<'c>(&self, cond: &'c ConditioningBundle) -> &'c Tensor {
        &cond.text_emb
    }

    fn set_text(&self, cond: &mut ConditioningBundle, text: Tensor) {
        cond.text_emb = text;
    }

    fn eps_with_text<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: usize,
        text: Var<'t>,
        cond: &ConditioningBundle,
    ) -> Result<Var<'t>> {
        let lv = self.lora.map(|l| LoraVars::new(tape, l, false));
        self.denoiser.eps_var(tape, x_t, t, text, cond, lv.as_ref(), self.cfg_scale)
    }
}

/// `x̂0 = (x_t − √(1−ᾱ) ε) / √ᾱ` on the tape.
pub fn x0_from_eps<'t>(x_t: Var<'t>, eps: Var<'t>, t: usize, sched: &NoiseSchedule) -> Result<Var<'t>> {
    let ab = sched.alpha_bar(t)?;
    Ok(x_t.sub(eps.scale((1.0 - ab).sqrt()))?.scale(ab.sqrt().recip()))
}

/// Loss, its gradient with respect to the text embedding, and ε.
pub fn loss_and_text_grad<M: TextConditioned, F: SemanticFeatures + ?Sized>(
    model: &M,
    features: &F,
    target_features: &Tensor,
    x_t: &Tensor,
    t: usize,
    cond: &M::Cond,
    sched: &NoiseSchedule,
) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let text = tape.leaf(model.text(cond).clone(), true);
    let x = tape.constant(x_t.clone());
    let eps = model.eps_with_text(&tape, x, t, text, cond)?;
    let x0 = x0_from_eps(x, eps, t, sched)?;
    let loss = guidance_loss_var(&tape, x0, target_features, features)?;
    loss.backward()?;
    let grad = text.grad().unwrap_or_else(|| Tensor::zeros(model.text(cond).shape()));
    Ok((loss.item(), grad, eps.tensor()))
}

fn loss_and_eps<M: TextConditioned, F: SemanticFeatures + ?Sized>(
    model: &M,
    features: &F,
    target_features: &Tensor,
    x_t: &Tensor,
    t: usize,
    cond: &M::Cond,
    sched: &NoiseSchedule,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let eps = model.eps_with_text(&tape, x, t, tape.constant(model.text(cond).clone()), cond)?;
    let x0 = x0_from_eps(x, eps, t, sched)?;
    Ok((guidance_loss_var(&tape, x0, target_features, features)?.item(), eps.tensor()))
}

/// `inner_iters` backtracking gradient steps on the text embedding at one
/// sampler step. Returns ε under the final embedding.
#[allow(clippy::too_many_arguments)]
pub fn optimize_embedding_step<M: TextConditioned, F: SemanticFeatures + ?Sized>(
    model: &M,
    features: &F,
    target_features: &Tensor,
    state: &SampleState,
    cond: &mut M::Cond,
    gcfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    trace: &mut GuidanceTrace,
) -> Result<Tensor> {
    let (x_t, t) = (&state.x_t, state.t);
    let mut eps = state.eps.clone();
    for _ in 0..gcfg.inner_iters {
        let (before, grad, eps_now) = loss_and_text_grad(model, features, target_features, x_t, t, cond, sched)?;
        eps = eps_now;
        if !grad.is_finite() || !before.is_finite() {
            return Err(Error::Guidance { step: state.step });
        }
        if before <= gcfg.stop_loss || grad.max_abs() == 0.0 {
            break;
        }
        let start = model.text(cond).clone();
        let mut lr = gcfg.step_size;
        let mut accepted = None;
        for halvings in 0..=gcfg.max_halvings {
            let mut cand = start.clone();
            cand.axpy(-lr, &grad)?;
            model.set_text(cond, cand);
            let (after, e) = loss_and_eps(model, features, target_features, x_t, t, cond, sched)?;
            if after.is_finite() && after <= before {
                accepted = Some((after, e, lr, halvings));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((after, e, lr, halvings)) => {
                eps = e;
                trace.entries.push(GuidanceEntry {
                    step: state.step,
                    t,
                    loss_before: before,
                    loss_after: after,
                    step_size: lr,
                    halvings,
                });
            }
            None => {
                model.set_text(cond, start);
                trace.entries.push(GuidanceEntry {
                    step: state.step,
                    t,
                    loss_before: before,
                    loss_after: before,
                    step_size: 0.0,
                    halvings: gcfg.max_halvings + 1,
                });
                break;
            }
        }
    }
    Ok(eps)
}

/// Sampler hook running [`optimize_embedding_step`] on the active steps.
pub struct FacialGuidance<'a, M: TextConditioned, F: SemanticFeatures + ?Sized> {
    pub model: M,
    pub features: &'a F,
    pub target_features: Tensor,
    pub config: GuidanceConfig,
    pub active: BTreeSet<usize>,
    pub schedule: NoiseSchedule,
    pub trace: GuidanceTrace,
}

impl<'a, M: TextConditioned, F: SemanticFeatures + ?Sized> FacialGuidance<'a, M, F> {
    pub fn new(
        model: M,
        features: &'a F,
        target: &Tensor,
        config: GuidanceConfig,
        num_steps: usize,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        config.validate(num_steps)?;
        let tape = Tape::new();
        let target_features = features.features(&tape, tape.constant(target.clone()))?.tensor();
        Ok(FacialGuidance {
            model,
            features,
            target_features,
            active: config.active_steps(num_steps),
            config,
            schedule,
            trace: GuidanceTrace::default(),
        })
    }
}

impl<M: TextConditioned, F: SemanticFeatures + ?Sized> GuidanceHook<M::Cond> for FacialGuidance<'_, M, F> {
    fn guide(&mut self, state: &SampleState, cond: &mut M::Cond) -> Result<Option<Tensor>> {
        if !self.active.contains(&state.step) {
            return Ok(None);
        }
        let eps = optimize_embedding_step(
            &self.model,
            self.features,
            &self.target_features,
            state,
            cond,
            &self.config,
            &self.schedule,
            &mut self.trace,
        )?;
        Ok(Some(eps))
    }
}
