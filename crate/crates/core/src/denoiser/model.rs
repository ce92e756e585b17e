//! The toy conditional UNet.
//!
//! A convolutional trunk processes the noisy latent on a `patch`-folded grid
//! at several resolutions. Before every cross-attention site the control
//! residual of that resolution is added to the hidden state. Each site
//! attends from its spatial tokens to the prompt (and, decoupled, to the
//! image prompt); their outputs are upsampled into a shared stream and
//! decoded into an offset `U` of the predicted data mean. A global site with
//! a single register query adds a prompt-dependent offset directly in image
//! space. The offset feeds the closed-form Gaussian ε head, so the frozen
//! base model is the exact posterior-mean denoiser of its prior while every
//! adapter acts through attention.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::diffusion::{EpsModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

use super::attention::{decoupled_cross_attention, lora_key, CrossAttentionVars};
use super::config::DenoiserConfig;
use super::lora::{linear_rows, LoraParams, LoraVars};
use super::prior::GaussianPrior;
use super::store::ParamStore;
use super::text::{ImageEncoder, TokenTable};

/// Everything the denoiser is conditioned on besides `x_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `[num_text_tokens, token_dim]`.
    pub text_emb: Tensor,
    /// Unconditional branch for classifier-free guidance.
    pub uncond_text_emb: Option<Tensor>,
    /// `[num_image_tokens, token_dim]`.
    pub image_emb: Option<Tensor>,
    pub adapter_scale: f64,
    /// One `[width, rows, cols]` tensor per resolution.
    pub control_residuals: Option<Vec<Tensor>>,
}

impl ConditioningBundle {
    pub fn text(text_emb: Tensor) -> Self {
        ConditioningBundle {
            text_emb,
            uncond_text_emb: None,
            image_emb: None,
            adapter_scale: 0.0,
            control_residuals: None,
        }
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let text = [cfg.num_text_tokens, cfg.token_dim];
        if self.text_emb.shape() != text {
            return Err(Error::dim("text embedding", self.text_emb.shape(), &text));
        }
        if let Some(u) = &self.uncond_text_emb {
            if u.shape() != text {
                return Err(Error::dim("unconditional embedding", u.shape(), &text));
            }
        }
        if let Some(i) = &self.image_emb {
            let want = [cfg.num_image_tokens, cfg.token_dim];
            if i.shape() != want {
                return Err(Error::dim("image embedding", i.shape(), &want));
            }
        }
        if !(self.adapter_scale >= 0.0 && self.adapter_scale.is_finite()) {
            return Err(Error::config("adapter scale must be finite and non-negative"));
        }
        if let Some(res) = &self.control_residuals {
            let want = cfg.residual_shapes();
            if res.len() != want.len() {
                return Err(Error::dim("control residuals", &[res.len()], &[want.len()]));
            }
            for (r, w) in res.iter().zip(&want) {
                if r.shape() != w {
                    return Err(Error::dim("control residual", r.shape(), w));
                }
            }
        }
        Ok(())
    }
}

/// Hidden states at the cross-attention sites, in site order.
pub struct Trunk<'t> {
    pub sites: Vec<Var<'t>>,
}

pub const GLOBAL: &str = "global";

fn site_name(i: usize) -> String {
    format!("attn{i}")
}

/// Sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[dim], |i| {
        let f = (-(10_000f64).ln() * (i % half) as f64 / half as f64).exp();
        let a = t as f64 * f;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// `[channels, rows, cols]` sinusoidal position planes.
fn positional_planes(channels: usize, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[channels, rows, cols], |i| {
        let (c, y, x) = (i / (rows * cols), (i / cols) % rows, i % cols);
        let freq = (1usize << (c / 4)) as f64 * std::f64::consts::TAU;
        let (u, n) = if c % 4 < 2 { (x, cols) } else { (y, rows) };
        let a = freq * (u as f64 + 0.5) / n as f64;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    prior: Arc<GaussianPrior>,
    schedule: NoiseSchedule,
    tokens: TokenTable,
    image_encoder: ImageEncoder,
    /// Frozen per-pixel scale of the offset.
    out_scale: Tensor,
    /// Per spatial site: base output projection is identically zero.
    silent: Vec<bool>,
}

impl Denoiser {
    /// Seeded random initialization, with the global output projection
    /// calibrated onto the prior's principal directions.
    pub fn new(config: DenoiserConfig, prior: Arc<GaussianPrior>, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        let mut d = Self::from_params(config, params, prior, schedule)?;
        d.calibrate_global()?;
        Ok(d)
    }

    /// Wraps existing parameters.
    pub fn from_params(
        config: DenoiserConfig,
        params: ParamStore,
        prior: Arc<GaussianPrior>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let shape = config.latent_shape();
        if prior.shape() != shape {
            return Err(Error::dim("prior", prior.shape(), &shape));
        }
        let reference = init_params(&config);
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        let tokens = TokenTable::new(config.token_dim, config.num_text_tokens, config.seed ^ 0x7e47);
        let image_encoder = ImageEncoder::new(
            shape[0],
            config.image_pool,
            config.num_image_tokens,
            config.token_dim,
            config.seed ^ 0x1a6e,
        );
        let out_scale = prior.marginal_std();
        let mut d = Denoiser {
            config,
            params,
            out_scale,
            prior,
            schedule,
            tokens,
            image_encoder,
            silent: Vec::new(),
        };
        d.refresh_silent()?;
        Ok(d)
    }

    fn refresh_silent(&mut self) -> Result<()> {
        self.silent = (0..self.config.attention_levels().len())
            .map(|i| {
                let w = self.params.get(&format!("{}.out", site_name(i)))?;
                Ok(w.data().iter().all(|&v| v == 0.0))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn prior(&self) -> &Arc<GaussianPrior> {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut TokenTable {
        &mut self.tokens
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image_encoder
    }

    /// Checksum of the frozen base parameters.
    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// `(name, d_in, d_out)` of every LoRA-adaptable projection.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        let d = self.config.token_dim;
        let mut out = Vec::new();
        for (i, &l) in self.config.attention_levels().iter().enumerate() {
            let s = site_name(i);
            out.push((lora_key(&s, "q"), self.config.widths[l], d));
            out.push((lora_key(&s, "k"), d, d));
            out.push((lora_key(&s, "v"), d, d));
            out.push((lora_key(&s, "out"), d, self.config.stream_channels));
        }
        let p: usize = self.config.latent_shape().iter().product();
        out.push((lora_key(GLOBAL, "q"), d, d));
        out.push((lora_key(GLOBAL, "k"), d, d));
        out.push((lora_key(GLOBAL, "v"), d, d));
        out.push((lora_key(GLOBAL, "out"), d, p));
        out
    }

    /// Fresh zero-initialized adapters for every target.
    pub fn init_lora(&self, rank: usize, alpha: f64, seed: u64) -> LoraParams {
        LoraParams::init(&self.lora_targets(), rank, alpha, seed)
    }

    /// Checks that `lora` only names known targets with matching shapes.
    pub fn check_lora(&self, lora: &LoraParams) -> Result<()> {
        lora.validate()?;
        let targets = self.lora_targets();
        for (name, l) in &lora.layers {
            let (_, d_in, d_out) = targets
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::config(format!("unknown LoRA target {name}")))?;
            if l.a.shape()[1] != *d_in || l.b.shape()[0] != *d_out {
                return Err(Error::config(format!(
                    "LoRA {name}: A {:?} / B {:?} do not fit {d_in} -> {d_out}",
                    l.a.shape(),
                    l.b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn embed_prompt(&self, prompt: &str) -> Result<Tensor> {
        self.tokens.embed(prompt)
    }

    /// Conditioning for `prompt` with an unconditional branch, optionally
    /// with an image prompt at scale `adapter_scale`.
    pub fn condition(&self, prompt: &str, image: Option<&Tensor>, adapter_scale: f64) -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            text_emb: self.tokens.embed(prompt)?,
            uncond_text_emb: Some(self.tokens.unconditional()),
            image_emb: image.map(|im| self.image_encoder.encode(im)).transpose()?,
            adapter_scale,
            control_residuals: None,
        })
    }

    fn c<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        Ok(tape.constant(self.params.get(name)?.clone()))
    }

    fn block<'t>(&self, tape: &'t Tape, prefix: &str, h: Var<'t>, temb: &Tensor) -> Result<Var<'t>> {
        let tb = self.params.get(&format!("{prefix}.time.w"))?.matmul(&temb.reshape(&[temb.len(), 1])?)?;
        let b1 = self.params.get(&format!("{prefix}.conv1.b"))?.add(&tb.reshape(&[tb.len()])?)?;
        let z = h
            .conv2d(self.c(tape, &format!("{prefix}.conv1.w"))?, Some(tape.constant(b1)), 1)?
            .silu()
            .conv2d(
                self.c(tape, &format!("{prefix}.conv2.w"))?,
                Some(self.c(tape, &format!("{prefix}.conv2.b"))?),
                1,
            )?;
        h.add(z)
    }

    fn conv_layer<'t>(&self, tape: &'t Tape, prefix: &str, h: Var<'t>) -> Result<Var<'t>> {
        h.conv2d(self.c(tape, &format!("{prefix}.w"))?, Some(self.c(tape, &format!("{prefix}.b"))?), 1)
    }

    /// Convolutional trunk: hidden states at every attention site, with
    /// control residuals added before each site.
    pub fn trunk<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: usize, residuals: Option<&[Tensor]>) -> Result<Trunk<'t>> {
        let cfg = &self.config;
        let shape = cfg.latent_shape();
        if x_t.shape() != shape {
            return Err(Error::dim("denoiser input", &x_t.shape(), &shape));
        }
        let want = cfg.residual_shapes();
        if let Some(res) = residuals {
            if res.len() != want.len() {
                return Err(Error::dim("control residuals", &[res.len()], &[want.len()]));
            }
            for (r, w) in res.iter().zip(&want) {
                if r.shape() != w {
                    return Err(Error::dim("control residual", r.shape(), w));
                }
            }
        }
        let inject = |h: Var<'t>, level: usize| -> Result<Var<'t>> {
            match residuals {
                Some(res) => h.add(tape.constant(res[level].clone())),
                None => Ok(h),
            }
        };
        let temb = timestep_embedding(t, cfg.time_dim);
        let (gh, gw) = cfg.grid(0);
        let folded = x_t.space_to_depth(cfg.patch)?;
        let pos = tape.constant(positional_planes(cfg.pos_channels, gh, gw));
        let input = if cfg.pos_channels > 0 { Var::concat0(&[folded, pos])? } else { folded };
        let mut h = self.conv_layer(tape, "conv_in", input)?;
        let levels = cfg.levels();
        let mut sites = Vec::with_capacity(2 * levels - 1);
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                h = self.conv_layer(tape, &format!("down{l}"), h.avg_pool2()?)?;
            }
            h = self.block(tape, &format!("enc{l}.res0"), h, &temb)?;
            h = self.block(tape, &format!("enc{l}.res1"), h, &temb)?;
            h = inject(h, l)?;
            sites.push(h);
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let up = h.upsample2()?;
            h = self.conv_layer(tape, &format!("dec{l}.merge"), Var::concat0(&[up, skips[l]])?)?;
            h = self.block(tape, &format!("dec{l}.res0"), h, &temb)?;
            h = inject(h, l)?;
            sites.push(h);
        }
        Ok(Trunk { sites })
    }

    fn attention_vars<'t>(&self, tape: &'t Tape, site: &str) -> Result<CrossAttentionVars<'t>> {
        Ok(CrossAttentionVars {
            wk: self.c(tape, &format!("{site}.k"))?,
            wv: self.c(tape, &format!("{site}.v"))?,
            wk_img: self.c(tape, &format!("{site}.k_img"))?,
            wv_img: self.c(tape, &format!("{site}.v_img"))?,
            heads: self.config.heads,
        })
    }

    fn site_active(&self, i: usize, lora: Option<&LoraVars<'_>>) -> bool {
        if !self.silent[i] {
            return true;
        }
        let Some(l) = lora else { return false };
        if l.scale == 0.0 {
            return false;
        }
        match l.layers.get(&lora_key(&site_name(i), "out")) {
            Some((_, b)) => b.requires_grad() || b.value().data().iter().any(|&v| v != 0.0),
            None => false,
        }
    }

    /// Whether any spatial site can contribute, so the trunk is needed.
    pub fn needs_trunk(&self, lora: Option<&LoraVars<'_>>) -> bool {
        (0..self.silent.len()).any(|i| self.site_active(i, lora))
    }

    /// Offset `U` of the predicted data mean, `[C, H, W]`.
    pub fn offset<'t>(
        &self,
        tape: &'t Tape,
        trunk: Option<&Trunk<'t>>,
        text: Var<'t>,
        image: Option<Var<'t>>,
        lambda: f64,
        lora: Option<&LoraVars<'t>>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = cfg.latent_shape();
        let image = image.filter(|_| lambda != 0.0);
        let scale = lora.map_or(0.0, |l| l.scale);
        let adapter = |site: &str, proj: &str| lora.and_then(|l| l.layers.get(&lora_key(site, proj)).copied());

        let mut total: Option<Var<'t>> = None;
        let mut stream: Option<Var<'t>> = None;
        for (i, &level) in cfg.attention_levels().iter().enumerate() {
            if !self.site_active(i, lora) {
                continue;
            }
            let trunk = trunk.ok_or_else(|| Error::contract("active attention site needs trunk features"))?;
            let s = site_name(i);
            let h = trunk.sites[i];
            let hs = h.shape();
            let tokens = h.reshape(&[hs[0], hs[1] * hs[2]])?.transpose()?;
            let q = linear_rows(tokens, self.c(tape, &format!("{s}.q"))?, adapter(&s, "q"), scale)?;
            let kv = self.attention_vars(tape, &s)?;
            let a = decoupled_cross_attention(q, text, image, lambda, &kv, lora.map(|l| (l, s.as_str())))?;
            let o = linear_rows(a, self.c(tape, &format!("{s}.out"))?, adapter(&s, "out"), scale)?;
            let mut map = o.transpose()?.reshape(&[cfg.stream_channels, hs[1], hs[2]])?;
            for _ in 0..level {
                map = map.upsample2()?;
            }
            stream = Some(match stream {
                Some(acc) => acc.add(map)?,
                None => map,
            });
        }
        if let Some(st) = stream {
            let u = st
                .conv2d(self.c(tape, "conv_out.w")?, Some(self.c(tape, "conv_out.b")?), 1)?
                .depth_to_space(cfg.patch)?;
            total = Some(u);
        }

        let register = self.c(tape, &format!("{GLOBAL}.register"))?;
        let q = linear_rows(register, self.c(tape, &format!("{GLOBAL}.q"))?, adapter(GLOBAL, "q"), scale)?;
        let kv = self.attention_vars(tape, GLOBAL)?;
        let a = decoupled_cross_attention(q, text, image, lambda, &kv, lora.map(|l| (l, GLOBAL)))?;
        let g = linear_rows(a, self.c(tape, &format!("{GLOBAL}.out"))?, adapter(GLOBAL, "out"), scale)?.reshape(&shape)?;
        let raw = match total {
            Some(u) => u.add(g)?,
            None => g,
        };
        raw.mul(tape.constant(self.out_scale.clone()))
    }

    /// ε from an offset, through the Gaussian head at timestep `t`.
    pub fn eps_from_offset<'t>(&self, x_t: Var<'t>, offset: Var<'t>, t: usize) -> Result<Var<'t>> {
        self.prior.eps(x_t, offset, self.schedule.alpha_bar(t)?)
    }

    /// Differentiable ε with the conditional text given as a tape value.
    ///
    /// When `cond` carries an unconditional embedding and `cfg_scale != 1`,
    /// classifier-free guidance is applied. The head is affine in the offset,
    /// so guidance is taken on offsets and the head evaluated once. The
    /// unconditional branch sees neither the image prompt nor the adapter.
    #[allow(clippy::too_many_arguments)]
    pub fn eps_var<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: usize,
        text: Var<'t>,
        cond: &ConditioningBundle,
        lora: Option<&LoraVars<'t>>,
        cfg_scale: f64,
    ) -> Result<Var<'t>> {
        cond.validate(&self.config)?;
        if text.shape() != cond.text_emb.shape() {
            return Err(Error::dim("text embedding", &text.shape(), cond.text_emb.shape()));
        }
        let trunk = if self.needs_trunk(lora) {
            Some(self.trunk(tape, x_t, t, cond.control_residuals.as_deref())?)
        } else {
            None
        };
        let image = cond.image_emb.as_ref().map(|i| tape.constant(i.clone()));
        let u_c = self.offset(tape, trunk.as_ref(), text, image, cond.adapter_scale, lora)?;
        let u = match &cond.uncond_text_emb {
            Some(null) if cfg_scale != 1.0 => {
                let u_u = self.offset(tape, trunk.as_ref(), tape.constant(null.clone()), None, 0.0, lora)?;
                u_u.add(u_c.sub(u_u)?.scale(cfg_scale))?
            }
            _ => u_c,
        };
        self.eps_from_offset(x_t, u, t)
    }

    /// Conditional ε prediction (no classifier-free guidance).
    pub fn forward(&self, x_t: &Tensor, t: usize, cond: &ConditioningBundle, lora: Option<&LoraParams>) -> Result<Tensor> {
        self.predict(x_t, t, cond, lora, 1.0)
    }

    /// ε prediction with classifier-free guidance at `cfg_scale`.
    pub fn predict(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &ConditioningBundle,
        lora: Option<&LoraParams>,
        cfg_scale: f64,
    ) -> Result<Tensor> {
        if let Some(l) = lora {
            self.check_lora(l)?;
        }
        let tape = Tape::new();
        let lv = lora.map(|l| LoraVars::new(&tape, l, false));
        let x = tape.constant(x_t.clone());
        let text = tape.constant(cond.text_emb.clone());
        Ok(self.eps_var(&tape, x, t, text, cond, lv.as_ref(), cfg_scale)?.tensor())
    }

    /// Global-site attention output without adapters or image prompt.
    fn global_features(&self, text: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let q = linear_rows(self.c(&tape, &format!("{GLOBAL}.register"))?, self.c(&tape, &format!("{GLOBAL}.q"))?, None, 0.0)?;
        let kv = self.attention_vars(&tape, GLOBAL)?;
        Ok(decoupled_cross_attention(q, tape.constant(text.clone()), None, 0.0, &kv, None)?.tensor())
    }

    /// Sets the global output projection to `S⁻¹·V·diag(√λ)·R·(I − Π)`, where
    /// `S` is the output scale and Π projects onto the global features of the
    /// unconditional and anchor prompts. Those prompts therefore leave the prior mean unchanged.
    fn calibrate_global(&mut self) -> Result<()> {
        let d = self.config.token_dim;
        let mut anchors = vec![self.tokens.unconditional()];
        for p in &self.config.anchor_prompts {
            anchors.push(self.tokens.embed(p)?);
        }
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for a in &anchors {
            let mut v = self.global_features(a)?.into_data();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut proj = DMatrix::<f64>::identity(d, d);
        for b in &basis {
            let bv = nalgebra::DVector::from_column_slice(b);
            proj -= &bv * bv.transpose();
        }
        let mut pm = self.prior.principal_map();
        for (j, &sd) in self.out_scale.data().iter().enumerate() {
            pm.row_mut(j).scale_mut(1.0 / sd);
        }
        let k = pm.ncols();
        let mut rng = Rng::with_stream(self.config.seed, 0x91b);
        let r = DMatrix::from_fn(k, d, |_, _| rng.normal() * self.config.global_gain / (d as f64).sqrt());
        let w = pm * r * proj;
        let p = w.nrows();
        let out = Tensor::from_fn(&[p, d], |i| w[(i / d, i % d)]);
        *self
            .params
            .get_mut(&format!("{GLOBAL}.out"))
            .ok_or_else(|| Error::Format("missing global.out".into()))? = out;
        Ok(())
    }
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    rng.normal_tensor(shape).scale(std)
}

fn conv(rng: &mut Rng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor {
    normal(rng, &[cout, cin, k, k], gain / ((cin * k * k) as f64).sqrt())
}

fn init_params(cfg: &DenoiserConfig) -> ParamStore {
    let mut rng = Rng::with_stream(cfg.seed, 0xba5e);
    let mut s = ParamStore::new();
    let [c, ..] = cfg.latent_shape();
    let folded = c * cfg.patch * cfg.patch;
    let w = &cfg.widths;
    let d = cfg.token_dim;
    s.insert("conv_in.w", conv(&mut rng, w[0], folded + cfg.pos_channels, 3, 1.0));
    s.insert("conv_in.b", Tensor::zeros(&[w[0]]));
    let block = |s: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize| {
        s.insert(format!("{prefix}.conv1.w"), conv(rng, width, width, 3, std::f64::consts::SQRT_2));
        s.insert(format!("{prefix}.conv1.b"), Tensor::zeros(&[width]));
        s.insert(format!("{prefix}.conv2.w"), conv(rng, width, width, 3, 0.5));
        s.insert(format!("{prefix}.conv2.b"), Tensor::zeros(&[width]));
        s.insert(format!("{prefix}.time.w"), normal(rng, &[width, cfg.time_dim], 1.0 / (cfg.time_dim as f64).sqrt()));
    };
    for l in 0..cfg.levels() {
        if l > 0 {
            s.insert(format!("down{l}.w"), conv(&mut rng, w[l], w[l - 1], 1, 1.0));
            s.insert(format!("down{l}.b"), Tensor::zeros(&[w[l]]));
        }
        block(&mut s, &mut rng, &format!("enc{l}.res0"), w[l]);
        block(&mut s, &mut rng, &format!("enc{l}.res1"), w[l]);
    }
    for l in (0..cfg.levels() - 1).rev() {
        s.insert(format!("dec{l}.merge.w"), conv(&mut rng, w[l], w[l + 1] + w[l], 1, 1.0));
        s.insert(format!("dec{l}.merge.b"), Tensor::zeros(&[w[l]]));
        block(&mut s, &mut rng, &format!("dec{l}.res0"), w[l]);
    }
    let sd = 1.0 / (d as f64).sqrt();
    let attn = |s: &mut ParamStore, rng: &mut Rng, site: &str, d_q: usize, d_out: usize| {
        s.insert(format!("{site}.q"), normal(rng, &[d, d_q], 1.0 / (d_q as f64).sqrt()));
        s.insert(format!("{site}.k"), normal(rng, &[d, d], sd));
        s.insert(format!("{site}.v"), normal(rng, &[d, d], sd));
        s.insert(format!("{site}.k_img"), normal(rng, &[d, d], sd));
        s.insert(format!("{site}.v_img"), normal(rng, &[d, d], sd));
        s.insert(format!("{site}.out"), Tensor::zeros(&[d_out, d]));
    };
    for (i, &l) in cfg.attention_levels().iter().enumerate() {
        attn(&mut s, &mut rng, &site_name(i), w[l], cfg.stream_channels);
    }
    let p: usize = cfg.latent_shape().iter().product();
    attn(&mut s, &mut rng, GLOBAL, d, p);
    s.insert(format!("{GLOBAL}.register"), rng.normal_tensor(&[1, d]));
    s.insert("conv_out.w", conv(&mut rng, folded, cfg.stream_channels, 3, 1.0));
    s.insert("conv_out.b", Tensor::zeros(&[folded]));
    s
}

/// The denoiser with an optional adapter set, as a sampler model.
#[derive(Clone, Copy)]
pub struct AdaptedDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub lora: Option<&'a LoraParams>,
}

impl EpsModel for AdaptedDenoiser<'_> {
    type Cond = ConditioningBundle;

    fn latent_shape(&self) -> Vec<usize> {
        self.denoiser.config.latent_shape().to_vec()
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &ConditioningBundle, cfg_scale: f64) -> Result<Tensor> {
        self.denoiser.predict(x_t, t, cond, self.lora, cfg_scale)
    }
}

impl EpsModel for Denoiser {
    type Cond = ConditioningBundle;

    fn latent_shape(&self) -> Vec<usize> {
        self.config.latent_shape().to_vec()
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &ConditioningBundle, cfg_scale: f64) -> Result<Tensor> {
        self.predict(x_t, t, cond, None, cfg_scale)
    }
}
