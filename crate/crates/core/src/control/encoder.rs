//! Per-condition convolutional encoders producing one residual per denoiser
//! resolution.

use crate::denoiser::{DenoiserConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

use super::map::{ConditionKind, ConditionMap};

pub const CONTROL_TAG: [u8; 4] = *b"CTRL";

#[derive(Clone, Debug, PartialEq)]
pub struct ControlParams {
    pub hidden: usize,
    pub patch: usize,
    pub image_size: [usize; 2],
    /// `[C_l, h_l, w_l]` per resolution.
    pub residual_shapes: Vec<[usize; 3]>,
    pub store: ParamStore,
}

impl ControlParams {
    /// Encoders for every condition kind with zero-initialised output
    /// projections, so the residuals start at zero.
    pub fn init(cfg: &DenoiserConfig, hidden: usize, seed: u64) -> Self {
        let [h, w, _] = cfg.latent_size;
        let shapes = cfg.residual_shapes();
        let folded = cfg.patch * cfg.patch;
        let mut rng = Rng::with_stream(seed, 0xc0);
        let mut store = ParamStore::new();
        for kind in ConditionKind::ALL {
            let k = kind.name();
            let conv = |rng: &mut Rng, cout: usize, cin: usize| {
                rng.normal_tensor(&[cout, cin, 3, 3]).scale(1.0 / ((cin * 9) as f64).sqrt())
            };
            store.insert(format!("{k}.in.w"), conv(&mut rng, hidden, folded));
            store.insert(format!("{k}.in.b"), Tensor::zeros(&[hidden]));
            store.insert(format!("{k}.mid.w"), conv(&mut rng, hidden, hidden));
            store.insert(format!("{k}.mid.b"), Tensor::zeros(&[hidden]));
            for (l, s) in shapes.iter().enumerate() {
                store.insert(format!("{k}.out{l}.w"), Tensor::zeros(&[s[0], hidden, 1, 1]));
                store.insert(format!("{k}.out{l}.b"), Tensor::zeros(&[s[0]]));
            }
        }
        ControlParams {
            hidden,
            patch: cfg.patch,
            image_size: [h, w],
            residual_shapes: shapes,
            store,
        }
    }

    /// Replaces the zero output projections with seeded random ones.
    pub fn randomize_outputs(&mut self, gain: f64, seed: u64) {
        let mut rng = Rng::with_stream(seed, 0xc1);
        for kind in ConditionKind::ALL {
            for l in 0..self.residual_shapes.len() {
                let w = self.store.get_mut(&format!("{}.out{l}.w", kind.name())).expect("output projection");
                *w = rng.normal_tensor(w.shape()).scale(gain / (self.hidden as f64).sqrt());
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    fn p<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        Ok(tape.constant(self.store.get(name)?.clone()))
    }

    /// Unweighted residuals of one map through its kind's encoder.
    pub fn encode(&self, map: &ConditionMap) -> Result<Vec<Tensor>> {
        let [h, w] = self.image_size;
        if map.map.shape() != [h, w] {
            return Err(Error::dim("control map", map.map.shape(), &[h, w]));
        }
        let tape = Tape::new();
        let k = map.kind.name();
        let x = tape.constant(map.map.reshape(&[1, h, w])?).space_to_depth(self.patch)?;
        let x = x
            .conv2d(self.p(&tape, &format!("{k}.in.w"))?, Some(self.p(&tape, &format!("{k}.in.b"))?), 1)?
            .silu();
        let mut feat = x
            .conv2d(self.p(&tape, &format!("{k}.mid.w"))?, Some(self.p(&tape, &format!("{k}.mid.b"))?), 1)?
            .silu();
        let mut out = Vec::with_capacity(self.residual_shapes.len());
        for l in 0..self.residual_shapes.len() {
            if l > 0 {
                feat = feat.avg_pool2()?;
            }
            let r = feat.conv2d(
                self.p(&tape, &format!("{k}.out{l}.w"))?,
                Some(self.p(&tape, &format!("{k}.out{l}.b"))?),
                1,
            )?;
            out.push(r.tensor());
        }
        Ok(out)
    }
}

/// Weight-scaled sum of per-map encoder residuals, one tensor per resolution.
pub fn control_forward(maps: &[ConditionMap], params: &ControlParams) -> Result<Vec<Tensor>> {
    if let Some(first) = maps.first() {
        if let Some(bad) = maps.iter().find(|m| m.map.shape() != first.map.shape()) {
            return Err(Error::dim("control maps", bad.map.shape(), first.map.shape()));
        }
    }
    let mut acc: Vec<Tensor> = params.residual_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for m in maps {
        m.validate()?;
        if m.weight == 0.0 {
            continue;
        }
        for (a, r) in acc.iter_mut().zip(params.encode(m)?) {
            a.axpy(m.weight, &r)?;
        }
    }
    Ok(acc)
}
