//! Low-rank adapters `W·x + (α/r)·B·(A·x)` on attention projections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

use super::store::ParamStore;

/// One adapted projection: `A` is `[r, d_in]`, `B` is `[d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraLayer {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Adapters for every adapted projection, keyed by projection name.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl LoraParams {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, so the adapted forward equals the base.
    ///
    /// `targets` lists `(name, d_in, d_out)`. Rank 0 adapts nothing.
    pub fn init(targets: &[(String, usize, usize)], rank: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 0x10a);
        let layers = if rank == 0 {
            BTreeMap::new()
        } else {
            targets
                .iter()
                .map(|(name, d_in, d_out)| {
                    let a = rng.normal_tensor(&[rank, *d_in]).scale(1.0 / (*d_in as f64).sqrt());
                    (name.clone(), LoraLayer { a, b: Tensor::zeros(&[*d_out, rank]) })
                })
                .collect()
        };
        LoraParams { rank, alpha, layers }
    }

    /// `α / r`; zero for rank 0.
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.values().map(LoraLayer::num_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in &self.layers {
            check_layer(name, l, self.rank)?;
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("LoRA alpha must be finite"));
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        self.to_store().checksum()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("lora.alpha", Tensor::new(&[1], vec![self.alpha]).expect("shape"));
        s.insert("lora.rank", Tensor::new(&[1], vec![self.rank as f64]).expect("shape"));
        for (name, l) in &self.layers {
            s.insert(format!("{name}.lora_a"), l.a.clone());
            s.insert(format!("{name}.lora_b"), l.b.clone());
        }
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        let alpha = s.get("lora.alpha")?.data()[0];
        let rank_f = s.get("lora.rank")?.data()[0];
        if !(rank_f >= 0.0 && rank_f.fract() == 0.0) {
            return Err(Error::Format(format!("bad LoRA rank {rank_f}")));
        }
        let rank = rank_f as usize;
        let mut layers = BTreeMap::new();
        for (name, t) in s.iter() {
            if let Some(base) = name.strip_suffix(".lora_a") {
                let b = s.get(&format!("{base}.lora_b"))?.clone();
                layers.insert(base.to_string(), LoraLayer { a: t.clone(), b });
            }
        }
        let p = LoraParams { rank, alpha, layers };
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(p)
    }
}

fn check_layer(name: &str, l: &LoraLayer, rank: usize) -> Result<()> {
    let (sa, sb) = (l.a.shape(), l.b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != rank || sb[1] != rank {
        return Err(Error::config(format!(
            "LoRA {name}: rank {rank} inconsistent with A {sa:?} and B {sb:?}"
        )));
    }
    Ok(())
}

/// `W·x + (α/r)·B·(A·x)` for a column vector `x` `[d_in]` or a batch of
/// columns `[d_in, n]`.
pub fn lora_forward(x: &Tensor, w: &Tensor, lora: Option<&LoraLayer>, alpha: f64) -> Result<Tensor> {
    let cols = match x.rank() {
        1 => x.reshape(&[x.len(), 1])?,
        2 => x.clone(),
        _ => return Err(Error::dim("lora_forward", x.shape(), w.shape())),
    };
    let mut out = w.matmul(&cols)?;
    if let Some(l) = lora {
        let r = l.a.shape().first().copied().unwrap_or(0);
        check_layer("lora_forward", l, r)?;
        if l.a.shape()[1] != w.shape()[1] || l.b.shape()[0] != w.shape()[0] {
            return Err(Error::config(format!(
                "LoRA A {:?} / B {:?} do not match W {:?}",
                l.a.shape(),
                l.b.shape(),
                w.shape()
            )));
        }
        let delta = l.b.matmul(&l.a.matmul(&cols)?)?;
        out.axpy(alpha / r as f64, &delta)?;
    }
    if x.rank() == 1 {
        out = out.reshape(&[w.shape()[0]])?;
    }
    Ok(out)
}

/// Adapter tensors recorded on a tape.
pub struct LoraVars<'t> {
    pub scale: f64,
    pub layers: BTreeMap<String, (Var<'t>, Var<'t>)>,
}

impl<'t> LoraVars<'t> {
    pub fn new(tape: &'t Tape, lora: &LoraParams, trainable: bool) -> Self {
        LoraVars {
            scale: lora.scale(),
            layers: lora
                .layers
                .iter()
                .map(|(k, l)| (k.clone(), (tape.leaf(l.a.clone(), trainable), tape.leaf(l.b.clone(), trainable))))
                .collect(),
        }
    }

    /// Collects gradients in the layout of `LoraParams`; untouched layers get zeros.
    pub fn grads(&self, like: &LoraParams) -> LoraParams {
        let mut out = like.clone();
        for (name, l) in out.layers.iter_mut() {
            let (a, b) = self.layers[name];
            l.a = a.grad().unwrap_or_else(|| Tensor::zeros(l.a.shape()));
            l.b = b.grad().unwrap_or_else(|| Tensor::zeros(l.b.shape()));
        }
        out
    }
}

/// Row-major linear map: `x [n, d_in] · Wᵀ + scale · (x·Aᵀ)·Bᵀ`.
pub fn linear_rows<'t>(x: Var<'t>, w: Var<'t>, lora: Option<(Var<'t>, Var<'t>)>, scale: f64) -> Result<Var<'t>> {
    let base = x.matmul_nt(w)?;
    match lora {
        Some((a, b)) if scale != 0.0 => base.add(x.matmul_nt(a)?.matmul_nt(b)?.scale(scale)),
        _ => Ok(base),
    }
}
