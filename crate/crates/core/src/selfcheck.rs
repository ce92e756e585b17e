//! Analytic oracles: DDIM recovery under a point-mass denoiser and
//! finite-difference checks of every gradient the pipeline relies on.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::denoiser::{ConditioningBundle, Denoiser, DenoiserConfig, GaussianPrior, LoraParams, LoraVars};
use crate::diffusion::{sample, Hooks, NoiseSchedule, PointMassDenoiser, SamplerConfig};
use crate::error::Result;
use crate::faceworld::FaceParser;
use crate::guidance::{guidance_loss_var, x0_from_eps, GuidedDenoiser, TextConditioned};
use crate::numerics::{check_gradient, Rng, Tape, Tensor, Var};

pub const DDIM_TOLERANCE: f64 = 1e-6;
pub const DDIM_SECONDS: f64 = 1.0;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Worst observed error.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }
}

/// 50 deterministic DDIM steps on a 3×64×64 point mass.
pub fn ddim_exactness(seed: u64) -> Result<Check> {
    let sched = NoiseSchedule::standard();
    let x0 = Rng::new(seed).uniform_tensor(&[3, 64, 64], 0.0, 1.0);
    let model = PointMassDenoiser { x0: x0.clone(), sched: sched.clone() };
    let cfg = SamplerConfig {
        eta: 0.0,
        num_steps: 50,
        seed,
        ..SamplerConfig::default()
    };
    let t0 = Instant::now();
    let out = sample(&model, &(), &cfg, &sched, Hooks::default())?;
    let secs = t0.elapsed().as_secs_f64();
    let err = out.max_abs_diff(&x0)?;
    let mut c = Check::at_most("ddim point-mass recovery", err, DDIM_TOLERANCE, format!("{secs:.3}s"));
    c.passed &= secs < DDIM_SECONDS;
    Ok(c)
}

fn small_denoiser(latent_size: [usize; 3]) -> Result<Denoiser> {
    let cfg = DenoiserConfig {
        latent_size,
        ..DenoiserConfig::tiny()
    };
    let mut rng = Rng::new(11);
    let imgs: Vec<Tensor> = (0..16).map(|_| rng.uniform_tensor(&cfg.latent_shape(), 0.0, 1.0)).collect();
    let prior = Arc::new(GaussianPrior::fit(&imgs, 3, 1.0, 1e-3)?);
    Denoiser::new(cfg, prior, NoiseSchedule::standard())
}

fn busy_lora(d: &Denoiser, rng: &mut Rng) -> LoraParams {
    let mut l = d.init_lora(2, 2.0, rng.next_u64());
    for layer in l.layers.values_mut() {
        layer.b = rng.normal_tensor(layer.b.shape()).scale(0.4);
    }
    l
}

fn random_bundle(d: &Denoiser, rng: &mut Rng) -> ConditioningBundle {
    let cfg = d.config();
    ConditioningBundle {
        text_emb: rng.normal_tensor(&[cfg.num_text_tokens, cfg.token_dim]),
        uncond_text_emb: Some(d.tokens().unconditional()),
        image_emb: Some(rng.normal_tensor(&[cfg.num_image_tokens, cfg.token_dim])),
        adapter_scale: 0.6,
        control_residuals: Some(cfg.residual_shapes().iter().map(|s| rng.normal_tensor(s).scale(0.5)).collect()),
    }
}

fn projection<'t>(tape: &'t Tape, e: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(e.mul(tape.constant(w.clone()))?.sum())
}

/// Denoiser output (projected on a random direction) against its latent,
/// text embedding and one adapter's `A` and `B`, with CFG, image prompt and
/// control residuals all active.
pub fn denoiser_gradients(probes: usize, seed: u64) -> Result<Vec<Check>> {
    let d = small_denoiser(DenoiserConfig::tiny().latent_size)?;
    let targets = d.lora_targets();
    let mut rng = Rng::with_stream(seed, 0x9d);
    let mut worst = [0.0f64; 4];
    for p in 0..probes {
        let l = busy_lora(&d, &mut rng);
        let c = random_bundle(&d, &mut rng);
        let x = rng.normal_tensor(&d.config().latent_shape());
        let w = rng.normal_tensor(&d.config().latent_shape());
        let t = 1 + rng.below(d.schedule().len() - 1);
        let cfg_scale = 1.0 + 3.0 * rng.uniform();
        worst[0] = worst[0].max(check_gradient(
            |tape, xv| {
                let lv = LoraVars::new(tape, &l, false);
                let e = d.eps_var(tape, xv, t, tape.constant(c.text_emb.clone()), &c, Some(&lv), cfg_scale)?;
                projection(tape, e, &w)
            },
            &x,
            FD_STEP,
        )?);
        worst[1] = worst[1].max(check_gradient(
            |tape, tv| {
                let lv = LoraVars::new(tape, &l, false);
                let e = d.eps_var(tape, tape.constant(x.clone()), t, tv, &c, Some(&lv), cfg_scale)?;
                projection(tape, e, &w)
            },
            &c.text_emb,
            FD_STEP,
        )?);
        let name = &targets[p % targets.len()].0;
        for which in 0..2 {
            let layer = &l.layers[name];
            let start = if which == 0 { &layer.a } else { &layer.b };
            let err = check_gradient(
                |tape, pv| {
                    let mut lv = LoraVars::new(tape, &l, false);
                    let entry = lv.layers.get_mut(name).expect("adapter layer");
                    if which == 0 {
                        entry.0 = pv;
                    } else {
                        entry.1 = pv;
                    }
                    let e = d.eps_var(tape, tape.constant(x.clone()), t, tape.constant(c.text_emb.clone()), &c, Some(&lv), cfg_scale)?;
                    projection(tape, e, &w)
                },
                start,
                FD_STEP,
            )?;
            worst[2 + which] = worst[2 + which].max(err);
        }
    }
    let detail = format!("{probes} probes");
    Ok(vec![
        Check::at_most("denoiser gradient wrt latent", worst[0], GRADIENT_TOLERANCE, detail.clone()),
        Check::at_most("denoiser gradient wrt text embedding", worst[1], GRADIENT_TOLERANCE, detail.clone()),
        Check::at_most("denoiser gradient wrt adapter A", worst[2], GRADIENT_TOLERANCE, detail.clone()),
        Check::at_most("denoiser gradient wrt adapter B", worst[3], GRADIENT_TOLERANCE, detail),
    ])
}

/// Parser-feature loss against the predicted clean image, and against the
/// text embedding through the denoiser and the `x̂0` map.
pub fn guidance_gradients(probes: usize, seed: u64) -> Result<Vec<Check>> {
    let size = 16;
    let parser = FaceParser::calibrated(3, 2, size)?;
    let d = small_denoiser([size, size, 3])?;
    let mut rng = Rng::with_stream(seed, 0x6c);
    let mut worst = [0.0f64; 2];
    for _ in 0..probes {
        let target = rng.uniform_tensor(&[3, size, size], 0.0, 1.0);
        let tf = {
            let tape = Tape::new();
            parser.forward(&tape, tape.constant(target))?.tensor()
        };
        let x0 = rng.uniform_tensor(&[3, size, size], 0.0, 1.0);
        worst[0] = worst[0].max(check_gradient(|tape, x| guidance_loss_var(tape, x, &tf, &parser), &x0, FD_STEP)?);

        let l = busy_lora(&d, &mut rng);
        let c = random_bundle(&d, &mut rng);
        let x_t = rng.normal_tensor(&d.config().latent_shape());
        let t = 1 + rng.below(d.schedule().len() - 1);
        let model = GuidedDenoiser {
            denoiser: &d,
            lora: Some(&l),
            cfg_scale: 3.0,
        };
        worst[1] = worst[1].max(check_gradient(
            |tape, tv| {
                let x = tape.constant(x_t.clone());
                let eps = model.eps_with_text(tape, x, t, tv, &c)?;
                let x0 = x0_from_eps(x, eps, t, d.schedule())?;
                guidance_loss_var(tape, x0, &tf, &parser)
            },
            &c.text_emb,
            FD_STEP,
        )?);
    }
    let detail = format!("{probes} probes");
    Ok(vec![
        Check::at_most("guidance loss gradient wrt predicted image", worst[0], GRADIENT_TOLERANCE, detail.clone()),
        Check::at_most("guidance loss gradient wrt text through denoiser", worst[1], GRADIENT_TOLERANCE, detail),
    ])
}

/// Everything above with 10 probes per gradient.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![ddim_exactness(seed)?];
    out.extend(denoiser_gradients(10, seed)?);
    out.extend(guidance_gradients(10, seed)?);
    Ok(out)
}
