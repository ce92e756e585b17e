//! Prompt embeddings and the frozen image-prompt encoder.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Fnv, Rng, Tape, Tensor, Var};

pub const PAD: &str = "<pad>";

/// Maps whitespace-separated prompt tokens to embedding rows.
///
/// Every token string has a deterministic N(0, 1) row derived from the seed
/// and the token; rows may be overridden by learned values.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTable {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub learned: BTreeMap<String, Tensor>,
}

impl TokenTable {
    pub fn new(dim: usize, max_tokens: usize, seed: u64) -> Self {
        TokenTable {
            dim,
            max_tokens,
            seed,
            learned: BTreeMap::new(),
        }
    }

    pub fn default_row(&self, token: &str) -> Tensor {
        Rng::new(self.seed ^ Fnv::hash_str(token)).normal_tensor(&[self.dim])
    }

    pub fn row(&self, token: &str) -> Tensor {
        self.learned
            .get(token)
            .cloned()
            .unwrap_or_else(|| self.default_row(token))
    }

    /// Prompt tokens padded to `max_tokens`.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        let mut toks: Vec<String> = prompt.split_whitespace().map(str::to_string).collect();
        if toks.len() > self.max_tokens {
            return Err(Error::config(format!(
                "prompt has {} tokens, at most {} allowed",
                toks.len(),
                self.max_tokens
            )));
        }
        toks.resize(self.max_tokens, PAD.to_string());
        Ok(toks)
    }

    /// `[max_tokens, dim]` embedding of a prompt.
    pub fn embed(&self, prompt: &str) -> Result<Tensor> {
        let toks = self.tokenize(prompt)?;
        let mut data = Vec::with_capacity(self.max_tokens * self.dim);
        for t in &toks {
            data.extend_from_slice(self.row(t).data());
        }
        Tensor::new(&[self.max_tokens, self.dim], data)
    }

    /// The unconditional (all-padding) embedding.
    pub fn unconditional(&self) -> Tensor {
        self.embed("").expect("empty prompt")
    }

    /// Embedding with the rows of `trainable` tokens routed through `leaf`, so
    /// gradients reach it. Other rows are constants.
    pub fn embed_var<'t>(&self, tape: &'t Tape, prompt: &str, trainable: &str, leaf: Var<'t>) -> Result<Var<'t>> {
        let toks = self.tokenize(prompt)?;
        let rows: Vec<Var<'t>> = toks
            .iter()
            .map(|t| {
                if t == trainable {
                    leaf.reshape(&[1, self.dim])
                } else {
                    Ok(tape.constant(self.row(t).reshape(&[1, self.dim])?))
                }
            })
            .collect::<Result<_>>()?;
        Var::concat0(&rows)
    }
}

/// Frozen random projection of a coarsely pooled image onto image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub pool: usize,
    pub tokens: usize,
    pub dim: usize,
    proj: Tensor,
}

impl ImageEncoder {
    pub fn new(channels: usize, pool: usize, tokens: usize, dim: usize, seed: u64) -> Self {
        let d_in = channels * pool * pool;
        let proj = Rng::with_stream(seed, 0x1ae).normal_tensor(&[tokens * dim, d_in]).scale(2.0 / (d_in as f64).sqrt());
        ImageEncoder { pool, tokens, dim, proj }
    }

    /// `[tokens, dim]` embedding of a `[C, H, W]` image in [0, 1].
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        let d_in = self.proj.shape()[1];
        if s.len() != 3 || s[0] * self.pool * self.pool != d_in || s[1] % self.pool != 0 || s[2] % self.pool != 0 {
            return Err(Error::dim("ImageEncoder", s, &[d_in / (self.pool * self.pool), self.pool, self.pool]));
        }
        let (h, w) = (s[1], s[2]);
        let (by, bx) = (h / self.pool, w / self.pool);
        let d = image.data();
        let pooled = Tensor::from_fn(&[d_in], |i| {
            let (ch, py, px) = (i / (self.pool * self.pool), (i / self.pool) % self.pool, i % self.pool);
            let mut s = 0.0;
            for y in py * by..(py + 1) * by {
                for x in px * bx..(px + 1) * bx {
                    s += d[ch * h * w + y * w + x];
                }
            }
            s / (by * bx) as f64 - 0.5
        });
        self.proj.matmul(&pooled.reshape(&[d_in, 1])?)?.reshape(&[self.tokens, self.dim])
    }
}
