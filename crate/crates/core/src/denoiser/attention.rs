use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::lora::{linear_rows, LoraVars};

/// Key/value projections of one cross-attention block, as tape values.
pub struct CrossAttentionVars<'t> {
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wk_img: Var<'t>,
    pub wv_img: Var<'t>,
    pub heads: usize,
}

/// Names of the LoRA targets inside block `prefix`.
pub fn lora_key(prefix: &str, proj: &str) -> String {
    format!("{prefix}.{proj}")
}

/// `Attn(q, K_text, V_text) + λ · Attn(q, K_img, V_img)` with separate key and
/// value projections for the image tokens. The text projections carry LoRA
/// adapters when given; the image projections are never adapted.
pub fn decoupled_cross_attention<'t>(
    q: Var<'t>,
    text: Var<'t>,
    image: Option<Var<'t>>,
    lambda: f64,
    p: &CrossAttentionVars<'t>,
    lora: Option<(&LoraVars<'t>, &str)>,
) -> Result<Var<'t>> {
    let d = q.shape().get(1).copied().unwrap_or(0);
    for (what, v) in [("text", Some(text)), ("image", image)] {
        if let Some(v) = v {
            let s = v.shape();
            if s.len() != 2 || s[1] != p.wk.shape()[1] {
                return Err(Error::dim(
                    if what == "text" { "cross_attention text" } else { "cross_attention image" },
                    &s,
                    &[0, p.wk.shape()[1]],
                ));
            }
        }
    }
    let adapter = |proj: &str| lora.and_then(|(l, prefix)| l.layers.get(&lora_key(prefix, proj)).copied());
    let scale = lora.map_or(0.0, |(l, _)| l.scale);
    let k = linear_rows(text, p.wk, adapter("k"), scale)?;
    let v = linear_rows(text, p.wv, adapter("v"), scale)?;
    if k.shape()[1] != d {
        return Err(Error::dim("cross_attention query", &q.shape(), &k.shape()));
    }
    let out = q.attention(k, v, p.heads)?;
    match image {
        Some(img) if lambda != 0.0 => {
            let ki = linear_rows(img, p.wk_img, None, 0.0)?;
            let vi = linear_rows(img, p.wv_img, None, 0.0)?;
            out.add(q.attention(ki, vi, p.heads)?.scale(lambda))
        }
        _ => Ok(out),
    }
}

/// Convenience wrapper on plain tensors, without adapters.
pub fn cross_attention_tensors(
    q: &Tensor,
    text: &Tensor,
    image: Option<&Tensor>,
    lambda: f64,
    weights: [&Tensor; 4],
    heads: usize,
) -> Result<Tensor> {
    let tape = Tape::new();
    let p = CrossAttentionVars {
        wk: tape.constant(weights[0].clone()),
        wv: tape.constant(weights[1].clone()),
        wk_img: tape.constant(weights[2].clone()),
        wv_img: tape.constant(weights[3].clone()),
        heads,
    };
    let img = image.map(|i| tape.constant(i.clone()));
    Ok(decoupled_cross_attention(tape.constant(q.clone()), tape.constant(text.clone()), img, lambda, &p, None)?.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn weights(rng: &mut Rng, d: usize) -> [Tensor; 4] {
        [
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
        ]
    }

    #[test]
    fn zero_lambda_is_text_only() {
        let mut rng = Rng::new(1);
        let w = weights(&mut rng, 4);
        let q = rng.normal_tensor(&[5, 4]);
        let text = rng.normal_tensor(&[3, 4]);
        let img = rng.normal_tensor(&[2, 4]);
        let wr = [&w[0], &w[1], &w[2], &w[3]];
        let a = cross_attention_tensors(&q, &text, Some(&img), 0.0, wr, 2).unwrap();
        let b = cross_attention_tensors(&q, &text, None, 0.6, wr, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mirrored_branch_doubles_output() {
        let mut rng = Rng::new(2);
        let w = weights(&mut rng, 4);
        let q = rng.normal_tensor(&[5, 4]);
        let text = rng.normal_tensor(&[3, 4]);
        let both = cross_attention_tensors(&q, &text, Some(&text), 1.0, [&w[0], &w[1], &w[0], &w[1]], 2).unwrap();
        let single = cross_attention_tensors(&q, &text, None, 1.0, [&w[0], &w[1], &w[2], &w[3]], 2).unwrap();
        assert!(both.max_abs_diff(&single.scale(2.0)).unwrap() < 1e-15);
    }

    #[test]
    fn scalar_attention_by_hand() {
        // One query, two tokens, width 1: softmax(q·k/√1)·v.
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let q = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let text = Tensor::new(&[2, 1], vec![2.0, -1.0]).unwrap();
        let out = cross_attention_tensors(&q, &text, None, 0.0, [&one, &one, &one, &one], 1).unwrap();
        let (s1, s2) = ((0.5f64 * 2.0).exp(), (0.5f64 * -1.0).exp());
        let want = (s1 * 2.0 + s2 * -1.0) / (s1 + s2);
        assert!((out.item() - want).abs() < 1e-15);
    }

    #[test]
    fn linear_in_lambda() {
        let mut rng = Rng::new(3);
        let w = weights(&mut rng, 4);
        let wr = [&w[0], &w[1], &w[2], &w[3]];
        let q = rng.normal_tensor(&[5, 4]);
        let text = rng.normal_tensor(&[3, 4]);
        let img = rng.normal_tensor(&[2, 4]);
        let base = cross_attention_tensors(&q, &text, None, 0.0, wr, 2).unwrap();
        let img_only = {
            let ki = img.matmul(&w[2].transpose().unwrap()).unwrap();
            let vi = img.matmul(&w[3].transpose().unwrap()).unwrap();
            let tape = Tape::new();
            tape.constant(q.clone())
                .attention(tape.constant(ki), tape.constant(vi), 2)
                .unwrap()
                .tensor()
        };
        // Central difference of a function that is exactly linear in λ.
        let h = 0.25;
        let plus = cross_attention_tensors(&q, &text, Some(&img), h, wr, 2).unwrap();
        let deriv = plus.sub(&base).unwrap().scale(1.0 / h);
        assert!(deriv.max_abs_diff(&img_only).unwrap() < 1e-12);
    }
}
