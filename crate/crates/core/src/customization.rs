//! DreamBooth-LoRA identity customization with prior preservation.
//!
//! LoRA adapters on every cross-attention projection, plus the embedding row
//! of the identity token, are fitted so that the instance prompt denotes the
//! source face. Samples of the frozen base model under the class prompt
//! regularize the class concept.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningBundle, Denoiser, LoraParams, LoraVars, ParamStore, LORA_TAG};
use crate::diffusion::{add_noise, sample, Hooks, SamplerConfig};
use crate::error::{Error, Result};
use crate::numerics::{Fnv, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomizationConfig {
    pub identity_token: String,
    pub instance_prompt: String,
    pub class_prompt: String,
    pub train_steps: usize,
    pub prior_count: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub learning_rate: f64,
    /// Learning rate of the identity-token embedding row.
    pub token_learning_rate: f64,
    pub prior_weight: f64,
    /// Sampler used to draw the prior-preservation set.
    pub prior_sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for CustomizationConfig {
    fn default() -> Self {
        CustomizationConfig {
            identity_token: "sks".into(),
            instance_prompt: "a photo of sks person".into(),
            class_prompt: "a photo of person".into(),
            train_steps: 200,
            prior_count: 20,
            lora_rank: 4,
            lora_alpha: 8.0,
            learning_rate: 1e-3,
            token_learning_rate: 3e-2,
            prior_weight: 1.0,
            prior_sampler: SamplerConfig::default(),
            seed: 0x5d_b007,
        }
    }
}

impl CustomizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.token_learning_rate >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite() && self.lora_alpha.is_finite()) {
            return Err(Error::config("prior_weight must be finite and non-negative"));
        }
        if !self.instance_prompt.split_whitespace().any(|t| t == self.identity_token) {
            return Err(Error::config(format!(
                "instance prompt {:?} lacks the identity token {:?}",
                self.instance_prompt, self.identity_token
            )));
        }
        Ok(())
    }
}

/// Trained adapters together with the learned identity-token row.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityAdapter {
    pub lora: LoraParams,
    pub token: String,
    pub embedding: Tensor,
}

const TOKEN_PREFIX: &str = "token.";

impl IdentityAdapter {
    /// Zero-initialized adapters; the token row starts at its table value.
    pub fn init(denoiser: &Denoiser, cfg: &CustomizationConfig) -> Self {
        IdentityAdapter {
            lora: denoiser.init_lora(cfg.lora_rank, cfg.lora_alpha, cfg.seed),
            token: cfg.identity_token.clone(),
            embedding: denoiser.tokens().row(&cfg.identity_token),
        }
    }

    /// Prompt embedding with the learned identity row.
    pub fn embed(&self, denoiser: &Denoiser, prompt: &str) -> Result<Tensor> {
        let mut table = denoiser.tokens().clone();
        table.learned.insert(self.token.clone(), self.embedding.clone());
        table.embed(prompt)
    }

    /// Inference conditioning: prompt with learned row, unconditional branch
    /// and the optional image prompt.
    pub fn condition(
        &self,
        denoiser: &Denoiser,
        prompt: &str,
        image: Option<&Tensor>,
        adapter_scale: f64,
    ) -> Result<ConditioningBundle> {
        let mut c = denoiser.condition(prompt, image, adapter_scale)?;
        c.text_emb = self.embed(denoiser, prompt)?;
        Ok(c)
    }

    pub fn checksum(&self) -> u64 {
        self.to_store().checksum()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = self.lora.to_store();
        s.insert(format!("{TOKEN_PREFIX}{}", self.token), self.embedding.clone());
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        let lora = LoraParams::from_store(s)?;
        let mut tokens = s.iter().filter(|(n, _)| n.starts_with(TOKEN_PREFIX));
        let (name, emb) = tokens
            .next()
            .ok_or_else(|| Error::Format("adapter file has no identity token".into()))?;
        if tokens.next().is_some() {
            return Err(Error::Format("adapter file has several identity tokens".into()));
        }
        Ok(IdentityAdapter {
            lora,
            token: name[TOKEN_PREFIX.len()..].to_string(),
            embedding: emb.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path, LORA_TAG)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&ParamStore::load(path, LORA_TAG)?)
    }

    /// Checks the adapters and token row against a denoiser.
    pub fn check(&self, denoiser: &Denoiser) -> Result<()> {
        denoiser.check_lora(&self.lora)?;
        let want = [denoiser.config().token_dim];
        if self.embedding.shape() != want {
            return Err(Error::dim("identity token row", self.embedding.shape(), &want));
        }
        Ok(())
    }
}

/// Draws `n` images from the base model under `prompt`, one seed per image.
pub fn build_prior_set(denoiser: &Denoiser, prompt: &str, n: usize, cfg: &SamplerConfig) -> Result<Vec<Tensor>> {
    let cond = denoiser.condition(prompt, None, 0.0)?;
    (0..n)
        .map(|i| {
            let sc = SamplerConfig {
                seed: cfg.seed ^ (Fnv::hash_str("prior").wrapping_add(i as u64)),
                ..cfg.clone()
            };
            let x = sample(denoiser, &cond, &sc, denoiser.schedule(), Hooks::default())?;
            Ok(x.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect()
}

/// One supervised pair of a training batch.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub image: &'a Tensor,
    pub prompt: &'a str,
    pub is_prior: bool,
}

/// Loss of one noised sample: `mean((ε − ε_θ)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub instance: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub instance_loss: Vec<f64>,
    pub prior_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    pub lora_checksum: u64,
    pub base_checksum: u64,
}

/// Adam state over a flat list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies one update with per-tensor learning rates.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lrs[i] * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-item losses and gradients for one batch; `weights` scales each
/// item's gradient. Returns `(losses, lora grads, token grad)`.
fn batch_gradients(
    denoiser: &Denoiser,
    adapter: &IdentityAdapter,
    batch: &[TrainItem<'_>],
    noise: &[(usize, Tensor)],
    prior_weight: f64,
) -> Result<(StepLosses, LoraParams, Tensor)> {
    let tape = Tape::new();
    let lv = LoraVars::new(&tape, &adapter.lora, true);
    let row = tape.leaf(adapter.embedding.clone(), true);
    let n_inst = batch.iter().filter(|b| !b.is_prior).count();
    let n_prior = batch.len() - n_inst;
    let mut total = None;
    let (mut inst, mut prior) = (0.0, 0.0);
    for (item, (t, eps)) in batch.iter().zip(noise) {
        let x_t = add_noise(item.image, *t, eps, denoiser.schedule())?;
        let text = denoiser.tokens().embed_var(&tape, item.prompt, &adapter.token, row)?;
        let cond = ConditioningBundle::text(denoiser.tokens().embed(item.prompt)?);
        let pred = denoiser.eps_var(&tape, tape.constant(x_t), *t, text, &cond, Some(&lv), 1.0)?;
        let mse = pred.sub(tape.constant(eps.clone()))?.square().mean();
        let w = if item.is_prior {
            prior += mse.item() / n_prior as f64;
            prior_weight / n_prior as f64
        } else {
            inst += mse.item() / n_inst as f64;
            1.0 / n_inst as f64
        };
        let term = mse.scale(w);
        total = Some(match total {
            Some(acc) => term.add(acc)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::contract("training batch is empty"))?;
    total.backward()?;
    let losses = StepLosses {
        instance: inst,
        prior,
        total: inst + prior_weight * prior,
    };
    let grads = lv.grads(&adapter.lora);
    let token_grad = row.grad().unwrap_or_else(|| Tensor::zeros(adapter.embedding.shape()));
    Ok((losses, grads, token_grad))
}

/// Noise draws for a batch.
fn draw_noise(rng: &mut Rng, shape: &[usize], n: usize, steps: usize) -> Vec<(usize, Tensor)> {
    (0..n)
        .map(|_| {
            let t = rng.below(steps);
            (t, rng.normal_tensor(shape))
        })
        .collect()
}

/// Losses of `batch` without updating anything.
pub fn batch_loss(
    denoiser: &Denoiser,
    adapter: &IdentityAdapter,
    batch: &[TrainItem<'_>],
    noise: &[(usize, Tensor)],
    prior_weight: f64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    if noise.len() != batch.len() {
        return Err(Error::contract("one noise draw per batch item required"));
    }
    let mut inst = Vec::new();
    let mut prior = Vec::new();
    for (item, (t, eps)) in batch.iter().zip(noise) {
        let x_t = add_noise(item.image, *t, eps, denoiser.schedule())?;
        let mut cond = ConditioningBundle::text(adapter.embed(denoiser, item.prompt)?);
        cond.uncond_text_emb = None;
        let pred = denoiser.forward(&x_t, *t, &cond, Some(&adapter.lora))?;
        let mse = pred.sub(eps)?.data().iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
        if item.is_prior {
            prior.push(mse);
        } else {
            inst.push(mse);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (i, p) = (mean(&inst), mean(&prior));
    Ok(StepLosses {
        instance: i,
        prior: p,
        total: i + prior_weight * p,
    })
}

/// One optimizer step on `batch`; only adapter tensors and the token row move.
pub fn training_step(
    denoiser: &Denoiser,
    adapter: &mut IdentityAdapter,
    opt: &mut Adam,
    batch: &[TrainItem<'_>],
    rng: &mut Rng,
    cfg: &CustomizationConfig,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    let noise = draw_noise(rng, &denoiser.config().latent_shape(), batch.len(), denoiser.schedule().len());
    let (losses, grads, token_grad) = batch_gradients(denoiser, adapter, batch, &noise, cfg.prior_weight)?;
    let mut flat_grads = Vec::with_capacity(2 * grads.layers.len() + 1);
    for l in grads.layers.values() {
        flat_grads.push(l.a.clone());
        flat_grads.push(l.b.clone());
    }
    flat_grads.push(token_grad);
    let mut lrs = vec![cfg.learning_rate; flat_grads.len()];
    *lrs.last_mut().expect("token slot") = cfg.token_learning_rate;
    let mut params: Vec<&mut Tensor> = Vec::with_capacity(flat_grads.len());
    for l in adapter.lora.layers.values_mut() {
        params.push(&mut l.a);
        params.push(&mut l.b);
    }
    params.push(&mut adapter.embedding);
    opt.update(&mut params, &flat_grads, &lrs);
    Ok(losses)
}

fn optimizer_for(adapter: &IdentityAdapter) -> Adam {
    let mut shapes: Vec<&[usize]> = Vec::new();
    for l in adapter.lora.layers.values() {
        shapes.push(l.a.shape());
        shapes.push(l.b.shape());
    }
    shapes.push(adapter.embedding.shape());
    Adam::new(&shapes)
}

/// Fits adapters to `source` with a precomputed prior-preservation set.
pub fn train_lora_with_prior(
    denoiser: &Denoiser,
    source: &Tensor,
    prior_set: &[Tensor],
    cfg: &CustomizationConfig,
) -> Result<(IdentityAdapter, TrainReport)> {
    cfg.validate()?;
    let shape = denoiser.config().latent_shape();
    if source.shape() != shape {
        return Err(Error::dim("customization source", source.shape(), &shape));
    }
    let mut adapter = IdentityAdapter::init(denoiser, cfg);
    let mut opt = optimizer_for(&adapter);
    let mut rng = Rng::with_stream(cfg.seed, 0x7a1);
    let base = denoiser.checksum();
    let mut report = TrainReport {
        instance_loss: Vec::with_capacity(cfg.train_steps),
        prior_loss: Vec::with_capacity(cfg.train_steps),
        total_loss: Vec::with_capacity(cfg.train_steps),
        lora_checksum: 0,
        base_checksum: base,
    };
    for step in 0..cfg.train_steps {
        let mut batch = vec![TrainItem {
            image: source,
            prompt: &cfg.instance_prompt,
            is_prior: false,
        }];
        if !prior_set.is_empty() {
            batch.push(TrainItem {
                image: &prior_set[step % prior_set.len()],
                prompt: &cfg.class_prompt,
                is_prior: true,
            });
        }
        let l = training_step(denoiser, &mut adapter, &mut opt, &batch, &mut rng, cfg)?;
        if ![l.instance, l.prior, l.total].iter().all(|v| v.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {l:?}"),
            });
        }
        report.instance_loss.push(l.instance);
        report.prior_loss.push(l.prior);
        report.total_loss.push(l.total);
    }
    report.lora_checksum = adapter.lora.checksum();
    Ok((adapter, report))
}

/// Builds the prior set from the base model, then trains.
pub fn train_lora(denoiser: &Denoiser, source: &Tensor, cfg: &CustomizationConfig) -> Result<(IdentityAdapter, TrainReport)> {
    cfg.validate()?;
    let prior = build_prior_set(denoiser, &cfg.class_prompt, cfg.prior_count, &cfg.prior_sampler)?;
    train_lora_with_prior(denoiser, source, &prior, cfg)
}

/// Fixed `(t, ε)` probes for before/after loss comparisons.
pub fn loss_probes(denoiser: &Denoiser, n: usize, seed: u64) -> Vec<(usize, Tensor)> {
    let mut rng = Rng::with_stream(seed, 0x9a0be);
    draw_noise(&mut rng, &denoiser.config().latent_shape(), n, denoiser.schedule().len())
}

/// Mean denoising loss of `image` under `prompt` over `probes`.
pub fn probe_loss(
    denoiser: &Denoiser,
    adapter: &IdentityAdapter,
    image: &Tensor,
    prompt: &str,
    probes: &[(usize, Tensor)],
) -> Result<f64> {
    let batch: Vec<TrainItem<'_>> = probes
        .iter()
        .map(|_| TrainItem {
            image,
            prompt,
            is_prior: false,
        })
        .collect();
    Ok(batch_loss(denoiser, adapter, &batch, probes, 0.0)?.instance)
}
