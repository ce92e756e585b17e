//! Seeded synthetic benchmark and the Cos / Expr / Pose / Shape report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::Landmarks;
use crate::customization::{build_prior_set, train_lora_with_prior, IdentityAdapter};
use crate::error::{Error, Result, StageExt};
use crate::faceworld::{estimate_params, render_face, Estimate, FaceParams};
use crate::numerics::{Rng, Tensor};

use super::config::SwapConfig;
use super::metrics::{cosine_id, estimates_l1, ParamDistances};
use super::swap::{swap_with_adapter, SwapContext, SwapReport};

#[derive(Clone, Debug)]
pub struct SwapPair {
    pub source: Tensor,
    pub target: Tensor,
    pub target_landmarks: Landmarks,
}

/// `n_pairs` pairs over `n_sources` source identities, each paired with
/// freshly drawn target faces.
pub fn synthetic_pairs(n_pairs: usize, n_sources: usize, size: usize, seed: u64) -> Result<Vec<SwapPair>> {
    if n_sources == 0 && n_pairs > 0 {
        return Err(Error::config("benchmark needs at least one source"));
    }
    let mut rng = Rng::with_stream(seed, 0xbe);
    let sources: Vec<Tensor> = (0..n_sources)
        .map(|_| Ok(render_face(&FaceParams::random(&mut rng), size)?.image))
        .collect::<Result<_>>()?;
    (0..n_pairs)
        .map(|i| {
            let t = render_face(&FaceParams::random(&mut rng), size)?;
            Ok(SwapPair {
                source: sources[i % n_sources].clone(),
                target: t.image,
                target_landmarks: t.landmarks,
            })
        })
        .collect()
}

/// One table line: Cos against the source, distances against the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cos: f64,
    pub expr: f64,
    pub pose: f64,
    pub shape: f64,
}

impl MetricRow {
    fn from(cos: f64, d: &ParamDistances) -> Self {
        MetricRow {
            cos,
            expr: d.expr,
            pose: d.pose,
            shape: d.shape,
        }
    }

    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let sum = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            cos: sum(|r| r.cos),
            expr: sum(|r| r.expr),
            pose: sum(|r| r.pose),
            shape: sum(|r| r.shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub index: usize,
    /// Swap output: Cos(output, source) and distances to the target.
    pub output: Option<MetricRow>,
    /// Unswapped reference: Cos(target, source) and distances source→target.
    pub reference: MetricRow,
    pub final_lp: Option<f64>,
    pub low_confidence: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<SwapReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    pub mean_output: MetricRow,
    pub mean_reference: MetricRow,
    pub succeeded: usize,
    pub failed: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format_table(&[("Target (no swap)", self.mean_reference), ("Ours", self.mean_output)])
    }

    /// JSON without timings, so reruns compare equal.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Aligned text table with the Cos↑ / Expr↓ / Pose↓ / Shape↓ header.
pub fn format_table(rows: &[(&str, MetricRow)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).chain(["Method".len()]).max().unwrap_or(6);
    let mut out = format!("{:<width$} | {:>6} | {:>6} | {:>6} | {:>6}\n", "Method", "Cos↑", "Expr↓", "Pose↓", "Shape↓");
    out.push_str(&format!("{}-+-{}-+-{}-+-{}-+-{}\n", "-".repeat(width), "-".repeat(6), "-".repeat(6), "-".repeat(6), "-".repeat(6)));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>6.4} | {:>6.4} | {:>6.4} | {:>6.4}\n",
            name, r.cos, r.expr, r.pose, r.shape
        ));
    }
    out
}

/// Swaps every pair and aggregates over the successful ones. Adapters are
/// trained once per distinct source and the prior set once overall.
pub fn evaluate(ctx: &SwapContext, pairs: &[SwapPair], cfg: &SwapConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::config("evaluate needs at least one pair"));
    }
    cfg.validate(ctx.denoiser.schedule())?;
    let c = &cfg.customization;
    let prior = build_prior_set(&ctx.denoiser, &c.class_prompt, c.prior_count, &c.prior_sampler).stage("customize")?;
    let mut adapters: BTreeMap<u64, std::result::Result<IdentityAdapter, String>> = BTreeMap::new();
    let mut estimates: BTreeMap<u64, Estimate> = BTreeMap::new();
    let mut estimate = |im: &Tensor| -> Result<Estimate> {
        let key = im.fingerprint();
        if let Some(e) = estimates.get(&key) {
            return Ok(e.clone());
        }
        let e = estimate_params(im, &cfg.estimator)?;
        estimates.insert(key, e.clone());
        Ok(e)
    };
    let mut results = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let (es, et) = (estimate(&p.source)?, estimate(&p.target)?);
        let ref_d = estimates_l1(&es, &et);
        let reference = MetricRow::from(cosine_id(&ctx.world, &p.target, &p.source)?, &ref_d);
        let adapter = adapters
            .entry(p.source.fingerprint())
            .or_insert_with(|| {
                train_lora_with_prior(&ctx.denoiser, &p.source, &prior, c)
                    .stage("customize")
                    .map(|(a, _)| a)
                    .map_err(|e| e.to_string())
            })
            .clone();
        let pair_cfg = SwapConfig {
            seed: cfg.seed.wrapping_add(index as u64),
            ..cfg.clone()
        };
        let run = adapter.map_err(Error::Contract).and_then(|a| {
            swap_with_adapter(ctx, &a, &p.source, &p.target, &p.target_landmarks, &pair_cfg)
        });
        results.push(match run {
            Ok(r) => PairResult {
                index,
                output: Some(MetricRow::from(r.metrics.cos_source, &r.metrics.to_target)),
                reference,
                final_lp: Some(r.metrics.final_lp),
                low_confidence: r.metrics.to_target.low_confidence || ref_d.low_confidence,
                error: None,
                report: Some(r),
            },
            Err(e) => PairResult {
                index,
                output: None,
                reference,
                final_lp: None,
                low_confidence: ref_d.low_confidence,
                error: Some(e.to_string()),
                report: None,
            },
        });
    }
    let ok: Vec<&PairResult> = results.iter().filter(|r| r.output.is_some()).collect();
    let mean_output = MetricRow::mean(&ok.iter().filter_map(|r| r.output).collect::<Vec<_>>());
    let mean_reference = MetricRow::mean(&ok.iter().map(|r| r.reference).collect::<Vec<_>>());
    let succeeded = ok.len();
    Ok(EvalReport {
        failed: results.len() - succeeded,
        succeeded,
        pairs: results,
        mean_output,
        mean_reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout_matches_fixture() {
        let t = format_table(&[
            ("DiffFace", MetricRow { cos: 0.4841, expr: 0.0357, pose: 0.0178, shape: 0.0642 }),
            ("Our", MetricRow { cos: 0.4020, expr: 0.0263, pose: 0.0153, shape: 0.0512 }),
        ]);
        let want = "\
Method   |   Cos↑ |  Expr↓ |  Pose↓ | Shape↓
---------+--------+--------+--------+-------
DiffFace | 0.4841 | 0.0357 | 0.0178 | 0.0642
Our      | 0.4020 | 0.0263 | 0.0153 | 0.0512
";
        assert_eq!(t, want);
    }

    #[test]
    fn mean_row_is_columnwise_mean() {
        let rows = [
            MetricRow { cos: 1.0, expr: 0.5, pose: 0.0, shape: 0.25 },
            MetricRow { cos: 0.0, expr: 0.25, pose: 0.5, shape: 0.75 },
        ];
        assert_eq!(MetricRow::mean(&rows), MetricRow { cos: 0.5, expr: 0.375, pose: 0.25, shape: 0.5 });
    }

    #[test]
    fn pairs_reuse_sources() {
        let p = synthetic_pairs(5, 2, 64, 1).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p[0].source, p[2].source);
        assert_ne!(p[0].source, p[1].source);
        assert_ne!(p[0].target, p[2].target);
        assert!(synthetic_pairs(1, 0, 64, 1).is_err());
    }
}
