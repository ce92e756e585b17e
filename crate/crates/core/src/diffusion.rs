//! Noise schedule, forward noising, x̂0 extraction and the DDIM sampler.
//!
//! The sampler runs `x_T ~ N(0, I)` through a uniform sub-sequence of the
//! training timesteps. At every step it predicts ε, hands the current state
//! (including x̂0) to an optional guidance hook that may rewrite the
//! conditioning, takes the DDIM transition
//!
//! ```text
//! x_prev = √ᾱ_prev · x̂0 + √(1 − ᾱ_prev − σ_t²) · ε + σ_t · z
//! x̂0     = (x_t − √(1 − ᾱ_t) · ε) / √ᾱ_t
//! ```
//!
//! and finally lets an optional inpainting hook overwrite the known region of
//! `x_prev`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Linear-β noise schedule with cumulative products ᾱ_t.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    /// `T` steps with β linear from `beta_start` to `beta_end`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for s in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            alpha_bar,
            beta_start,
            beta_end,
        })
    }

    /// Schedule from explicit ᾱ values; must be strictly decreasing in (0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config("empty alpha_bar"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("alpha_bar must be strictly decreasing"));
        }
        let n = alpha_bar.len();
        let beta_start = 1.0 - alpha_bar[0];
        let beta_end = if n == 1 {
            beta_start
        } else {
            1.0 - alpha_bar[n - 1] / alpha_bar[n - 2]
        };
        Ok(NoiseSchedule {
            alpha_bar,
            beta_start,
            beta_end,
        })
    }

    /// The conventional default: T = 1000, β ∈ [1e−4, 0.02].
    pub fn standard() -> Self {
        Self::new(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} outside schedule of length {}", self.len())))
    }

    /// ᾱ at `t`, where `None` is the clean endpoint (ᾱ = 1).
    pub fn alpha_bar_at(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// Descending uniform sub-sequence of `num_steps` timesteps ending each
    /// stride, so the first step is `T − 1`.
    pub fn timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if num_steps == 0 || num_steps > n {
            return Err(Error::config(format!("num_steps {num_steps} must be in 1..={n}")));
        }
        Ok((0..num_steps).rev().map(|i| (i + 1) * n / num_steps - 1).collect())
    }
}

/// DDIM sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Scale of σ_t; 0 is deterministic DDIM.
    pub eta: f64,
    pub num_steps: usize,
    /// Classifier-free guidance weight.
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            eta: 0.0,
            num_steps: 25,
            cfg_scale: 3.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.num_steps == 0 || self.num_steps > sched.len() {
            return Err(Error::config(format!(
                "num_steps {} must be in 1..={}",
                self.num_steps,
                sched.len()
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// What a hook sees at each sampler step.
#[derive(Clone, Debug)]
pub struct SampleState {
    pub x_t: Tensor,
    pub t: usize,
    /// Position of `t` in the sampler's step sequence.
    pub step: usize,
    pub t_prev: Option<usize>,
    pub eps: Tensor,
    pub x0_pred: Tensor,
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
pub fn add_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "add_noise", |x, e| a * x + b * e)
}

/// `(x_t − √(1 − ᾱ_t) · ε) / √ᾱ_t`
pub fn predict_x0(x_t: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Singularity { t });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, "predict_x0", |x, e| (x - b * e) / a)
}

/// σ_t = η · √((1 − ᾱ_prev)/(1 − ᾱ_t)) · √(1 − ᾱ_t/ᾱ_prev)
pub fn ddim_sigma(eta: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

/// One DDIM transition from `t` to `t_prev` (`None` = clean sample).
///
/// Draws from `rng` only when σ_t > 0.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::contract(format!("t_prev {tp} must precede t {t}")));
        }
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_at(t_prev)?;
    let x0 = predict_x0(x_t, eps_pred, t, sched)?;
    let sigma = ddim_sigma(cfg.eta, ab_t, ab_prev);
    let dir = 1.0 - ab_prev - sigma * sigma;
    if dir < -1e-12 {
        return Err(Error::config(format!(
            "eta {} too large for schedule at t={t}: 1 - ᾱ_prev - σ² = {dir}",
            cfg.eta
        )));
    }
    let (a, b) = (ab_prev.sqrt(), dir.max(0.0).sqrt());
    let mut out = x0.zip_map(eps_pred, "ddim_step", |x, e| a * x + b * e)?;
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// `mask ⊙ x_gen + (1 − mask) ⊙ add_noise(x_targ, t, z)`.
///
/// `mask` is either the full shape of the images or their trailing `[H, W]`,
/// broadcast over channels. At the clean endpoint (`t = None`) the target is
/// used as-is and no noise is drawn.
pub fn inpaint_blend(
    x_gen: &Tensor,
    x_targ: &Tensor,
    mask: &Tensor,
    t: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    x_gen.same_shape(x_targ, "inpaint_blend")?;
    let shape = x_gen.shape();
    let plane = mask.len();
    let broadcast = mask.shape() == shape || (shape.len() >= 2 && mask.shape() == &shape[shape.len() - 2..]);
    if !broadcast {
        return Err(Error::dim("inpaint_blend mask", mask.shape(), shape));
    }
    if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::contract("mask values must lie in [0, 1]"));
    }
    let known = match t {
        None => x_targ.clone(),
        Some(t) => {
            let z = rng.normal_tensor(shape);
            add_noise(x_targ, t, &z, sched)?
        }
    };
    let md = mask.data();
    let mut out = x_gen.clone();
    for (i, (o, &k)) in out.data_mut().iter_mut().zip(known.data()).enumerate() {
        let m = md[i % plane];
        *o = m * *o + (1.0 - m) * k;
    }
    Ok(out)
}

/// An ε-prediction model the sampler can drive.
pub trait EpsModel {
    type Cond: Clone;

    fn latent_shape(&self) -> Vec<usize>;

    /// ε prediction at `t`, with classifier-free guidance applied when the
    /// conditioning carries an unconditional branch.
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Self::Cond, cfg_scale: f64) -> Result<Tensor>;
}

/// Called after every ε prediction. Returning `Some(eps)` replaces the
/// prediction used for the transition (after the hook changed `cond`).
pub trait GuidanceHook<C> {
    fn guide(&mut self, state: &SampleState, cond: &mut C) -> Result<Option<Tensor>>;
}

/// Called on every new sample `x_prev`; may overwrite known regions.
pub trait InpaintHook {
    fn blend(&mut self, x_prev: Tensor, t_prev: Option<usize>, sched: &NoiseSchedule) -> Result<Tensor>;
}

/// Optional per-step callbacks, run guidance first, then inpainting.
pub struct Hooks<'a, C> {
    pub guidance: Option<&'a mut dyn GuidanceHook<C>>,
    pub inpaint: Option<&'a mut dyn InpaintHook>,
}

impl<C> Default for Hooks<'_, C> {
    fn default() -> Self {
        Hooks {
            guidance: None,
            inpaint: None,
        }
    }
}

/// Known-region re-noising with its own random stream.
pub struct MaskedBlend {
    pub target: Tensor,
    pub mask: Tensor,
    pub rng: Rng,
}

impl InpaintHook for MaskedBlend {
    fn blend(&mut self, x_prev: Tensor, t_prev: Option<usize>, sched: &NoiseSchedule) -> Result<Tensor> {
        inpaint_blend(&x_prev, &self.target, &self.mask, t_prev, sched, &mut self.rng)
    }
}

/// Runs the full DDIM loop and returns x_0.
pub fn sample<M: EpsModel>(
    model: &M,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    hooks: Hooks<'_, M::Cond>,
) -> Result<Tensor> {
    cfg.validate(sched)?;
    let Hooks {
        mut guidance,
        mut inpaint,
    } = hooks;
    let mut rng = Rng::new(cfg.seed);
    let mut x = rng.normal_tensor(&model.latent_shape());
    let mut cond = cond.clone();
    let steps = sched.timesteps(cfg.num_steps)?;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied();
        let mut eps = model.predict_eps(&x, t, &cond, cfg.cfg_scale)?;
        if let Some(g) = guidance.as_deref_mut() {
            let state = SampleState {
                x0_pred: predict_x0(&x, &eps, t, sched)?,
                x_t: x.clone(),
                t,
                step: i,
                t_prev,
                eps: eps.clone(),
            };
            if let Some(updated) = g.guide(&state, &mut cond)? {
                eps = updated;
            }
        }
        x = ddim_step(&x, &eps, t, t_prev, cfg, sched, &mut rng)?;
        if let Some(h) = inpaint.as_deref_mut() {
            x = h.blend(x, t_prev, sched)?;
        }
        if !x.is_finite() {
            return Err(Error::contract(format!("sampler produced non-finite values at t={t}")));
        }
    }
    Ok(x)
}

/// Closed-form optimal ε for a point-mass data distribution at `x0`.
#[derive(Clone, Debug)]
pub struct PointMassDenoiser {
    pub x0: Tensor,
    pub sched: NoiseSchedule,
}

impl EpsModel for PointMassDenoiser {
    type Cond = ();

    fn latent_shape(&self) -> Vec<usize> {
        self.x0.shape().to_vec()
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, _cond: &(), _cfg_scale: f64) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(&self.x0, "point_mass", |x, x0| (x - a * x0) / b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn t1(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn brute_alpha_bar(steps: usize, b0: f64, b1: f64) -> f64 {
        let mut p = 1.0;
        for s in 0..steps {
            p *= 1.0 - (b0 + (b1 - b0) * s as f64 / (steps - 1) as f64);
        }
        p
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::new(1, 1e-4, 1e-4).unwrap();
        assert!((s.alpha_bar(0).unwrap() - 0.9999).abs() < 1e-15);

        let s = NoiseSchedule::standard();
        let last = *s.alpha_bars().last().unwrap();
        assert!((last - brute_alpha_bar(1000, 1e-4, 0.02)).abs() < 1e-18);
        assert!((last - 4.04e-5).abs() < 0.01e-5, "{last}");
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::new(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn timesteps_are_uniform_and_descending() {
        let s = NoiseSchedule::standard();
        let ts = s.timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 19);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(s.timesteps(1000).unwrap().last(), Some(&0));
        assert!(s.timesteps(1001).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let x0 = t1(0.7);
        assert_eq!(add_noise(&x0, 0, &t1(3.0), &s).unwrap(), x0);
        let xt = add_noise(&t1(1.0), 1, &t1(-0.5), &s).unwrap();
        assert!((xt.item() - 0.0669873).abs() < 1e-7);
        let xt = add_noise(&t1(2.0), 1, &t1(0.0), &s).unwrap();
        assert_eq!(xt.item(), 1.0);
        assert!(add_noise(&t1(1.0), 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.64, 0.25]).unwrap();
        assert_eq!(predict_x0(&t1(0.5), &t1(0.3), 0, &s).unwrap().item(), 0.5);
        assert!((predict_x0(&t1(0.8), &t1(0.0), 1, &s).unwrap().item() - 1.0).abs() < 1e-15);
        let x0 = predict_x0(&t1(0.0669873), &t1(-0.5), 2, &s).unwrap();
        assert!((x0.item() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn ddim_step_examples() {
        let cfg = SamplerConfig {
            eta: 0.0,
            ..Default::default()
        };
        let mut rng = Rng::new(0);
        let s = NoiseSchedule::from_alpha_bar(vec![0.5, 0.25]).unwrap();
        let x0 = predict_x0(&t1(0.3), &t1(0.2), 1, &s).unwrap();
        let out = ddim_step(&t1(0.3), &t1(0.2), 1, None, &cfg, &s, &mut rng).unwrap();
        assert_eq!(out, x0);

        // √0.5·1.0 + √0.5·(−0.5)
        let out = ddim_step(&t1(0.0669873), &t1(-0.5), 1, Some(0), &cfg, &s, &mut rng).unwrap();
        assert!((out.item() - 0.3535534).abs() < 1e-7, "{}", out.item());

        // Same ᾱ at both ends: with a one-entry schedule the clean endpoint
        // coincides only when ᾱ = 1.
        let s = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        let err = predict_x0(&t1(0.4), &t1(0.0), 0, &s).unwrap();
        assert_eq!(err.item(), 0.4);
        let out = ddim_step(&t1(0.4), &t1(0.0), 0, None, &cfg, &s, &mut rng).unwrap();
        assert_eq!(out.item(), 0.4);
    }

    #[test]
    fn ddim_step_rejects_bad_order_and_eta() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.9, 0.5, 0.1]).unwrap();
        let mut rng = Rng::new(0);
        let cfg = SamplerConfig::default();
        assert!(ddim_step(&t1(0.0), &t1(0.0), 1, Some(1), &cfg, &s, &mut rng).is_err());
        let wild = SamplerConfig {
            eta: 3.0,
            ..Default::default()
        };
        assert!(matches!(
            ddim_step(&t1(0.0), &t1(0.0), 2, Some(0), &wild, &s, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_step_consumes_no_randomness() {
        let s = NoiseSchedule::standard();
        let cfg = SamplerConfig::default();
        let mut rng = Rng::new(9);
        let before = rng.clone().next_u64();
        let x = Tensor::from_fn(&[4], |i| i as f64);
        ddim_step(&x, &x, 500, Some(480), &cfg, &s, &mut rng).unwrap();
        assert_eq!(rng.next_u64(), before);

        let noisy = SamplerConfig { eta: 1.0, ..cfg };
        let a = ddim_step(&x, &x, 500, Some(480), &noisy, &s, &mut Rng::new(1)).unwrap();
        let b = ddim_step(&x, &x, 500, Some(480), &noisy, &s, &mut Rng::new(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn point_mass_sampling_recovers_x0() {
        let sched = NoiseSchedule::standard();
        let x0 = Rng::new(3).uniform_tensor(&[3, 8, 8], 0.0, 1.0);
        let model = PointMassDenoiser {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        for steps in [5, 20, 50] {
            let cfg = SamplerConfig {
                num_steps: steps,
                seed: 11,
                ..Default::default()
            };
            let out = sample(&model, &(), &cfg, &sched, Hooks::default()).unwrap();
            assert!(out.max_abs_diff(&x0).unwrap() <= 1e-6, "{steps} steps");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = NoiseSchedule::standard();
        let model = PointMassDenoiser {
            x0: Tensor::full(&[2, 4, 4], 0.3),
            sched: sched.clone(),
        };
        let cfg = SamplerConfig {
            eta: 0.5,
            num_steps: 10,
            seed: 5,
            ..Default::default()
        };
        let a = sample(&model, &(), &cfg, &sched, Hooks::default()).unwrap();
        let b = sample(&model, &(), &cfg, &sched, Hooks::default()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    struct Scramble;
    impl EpsModel for Scramble {
        type Cond = ();
        fn latent_shape(&self) -> Vec<usize> {
            vec![2, 3, 3]
        }
        fn predict_eps(&self, x: &Tensor, t: usize, _: &(), _: f64) -> Result<Tensor> {
            Ok(x.map(|v| (v * 1.3 + t as f64 * 1e-3).sin()))
        }
    }

    #[test]
    fn all_ones_mask_matches_unhooked_run() {
        let sched = NoiseSchedule::standard();
        let cfg = SamplerConfig {
            num_steps: 8,
            seed: 2,
            ..Default::default()
        };
        let plain = sample(&Scramble, &(), &cfg, &sched, Hooks::default()).unwrap();
        let mut blend = MaskedBlend {
            target: Tensor::full(&[2, 3, 3], 0.9),
            mask: Tensor::ones(&[3, 3]),
            rng: Rng::new(77),
        };
        let hooked = sample(
            &Scramble,
            &(),
            &cfg,
            &sched,
            Hooks {
                guidance: None,
                inpaint: Some(&mut blend),
            },
        )
        .unwrap();
        assert_eq!(plain.data(), hooked.data());
    }

    #[test]
    fn inpainting_preserves_known_region_exactly() {
        let sched = NoiseSchedule::standard();
        let target = Rng::new(4).uniform_tensor(&[2, 3, 3], 0.0, 1.0);
        let mask = Tensor::from_fn(&[3, 3], |i| (i % 2) as f64);
        let mut blend = MaskedBlend {
            target: target.clone(),
            mask: mask.clone(),
            rng: Rng::new(8),
        };
        let cfg = SamplerConfig {
            num_steps: 6,
            ..Default::default()
        };
        let out = sample(
            &Scramble,
            &(),
            &cfg,
            &sched,
            Hooks {
                guidance: None,
                inpaint: Some(&mut blend),
            },
        )
        .unwrap();
        for (i, (&o, &t)) in out.data().iter().zip(target.data()).enumerate() {
            if mask.data()[i % 9] == 0.0 {
                assert_eq!(o.to_bits(), t.to_bits());
            }
        }
    }

    #[test]
    fn inpaint_blend_examples() {
        let sched = NoiseSchedule::standard();
        let gen = Rng::new(1).normal_tensor(&[3, 4, 4]);
        let targ = Rng::new(2).uniform_tensor(&[3, 4, 4], 0.0, 1.0);
        let out = inpaint_blend(&gen, &targ, &Tensor::ones(&[4, 4]), Some(100), &sched, &mut Rng::new(0)).unwrap();
        assert_eq!(out, gen);

        let out = inpaint_blend(&gen, &targ, &Tensor::zeros(&[4, 4]), Some(100), &sched, &mut Rng::new(5)).unwrap();
        let z = Rng::new(5).normal_tensor(&[3, 4, 4]);
        assert_eq!(out, add_noise(&targ, 100, &z, &sched).unwrap());

        // Scalar-loop oracle for a mixed binary mask.
        let mask = Tensor::from_fn(&[4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let out = inpaint_blend(&gen, &targ, &mask, Some(100), &sched, &mut Rng::new(5)).unwrap();
        let noised = add_noise(&targ, 100, &z, &sched).unwrap();
        for c in 0..3 {
            for p in 0..16 {
                let i = c * 16 + p;
                let want = if mask.data()[p] == 1.0 {
                    gen.data()[i]
                } else {
                    noised.data()[i]
                };
                assert_eq!(out.data()[i], want);
            }
        }
        let bad = Tensor::full(&[4, 4], 1.5);
        assert!(matches!(
            inpaint_blend(&gen, &targ, &bad, Some(1), &sched, &mut Rng::new(0)),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn predict_x0_inverts_add_noise(seed in 0u64..1000, t in 0usize..1000) {
            let sched = NoiseSchedule::standard();
            let mut rng = Rng::new(seed);
            let x0 = rng.uniform_tensor(&[16], -1.0, 1.0);
            let eps = rng.normal_tensor(&[16]);
            let xt = add_noise(&x0, t, &eps, &sched).unwrap();
            let back = predict_x0(&xt, &eps, t, &sched).unwrap();
            // Relative to the 1/√ᾱ_t amplification of the last-ulp rounding in x_t.
            let tol = 1e-12f64.max(4.0 * f64::EPSILON / sched.alpha_bar(t).unwrap().sqrt());
            prop_assert!(back.max_abs_diff(&x0).unwrap() <= tol);
        }
    }
}
