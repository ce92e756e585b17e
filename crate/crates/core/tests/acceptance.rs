//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! A failing criterion is reported, not raised; the process only exits
//! non-zero when a criterion cannot be evaluated at all.

use std::process::ExitCode;
use std::time::Instant;

use diffswap_core::control::{canny_edges, control_forward, gaussian_blur, CannyConfig, ConditionKind, ConditionMap, ControlParams};
use diffswap_core::customization::{build_prior_set, loss_probes, probe_loss, train_lora_with_prior, IdentityAdapter};
use diffswap_core::denoiser::AdaptedDenoiser;
use diffswap_core::diffusion::{sample, Hooks, SamplerConfig};
use diffswap_core::faceworld::{estimate_params, render_image, FaceParams, PARAM_DIM};
use diffswap_core::guidance::GuidanceConfig;
use diffswap_core::numerics::{Rng, Tensor};
use diffswap_core::pipeline::{evaluate, feather_mask, swap, synthetic_pairs, EvalReport, SwapConfig, SwapContext};
use diffswap_core::selfcheck;
use diffswap_core::Result;

const BENCH_PAIRS: usize = 20;
const BENCH_SOURCES: usize = 5;
const BENCH_SEED: u64 = 7;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn ddim() -> Result<Outcome> {
    let c = selfcheck::ddim_exactness(0)?;
    Ok(outcome(c.passed, format!("max error {:.2e} (limit 1e-6), {} (limit 1 s)", c.value, c.detail)))
}

fn gradients() -> Result<Outcome> {
    let mut checks = selfcheck::denoiser_gradients(10, 0)?;
    checks.extend(selfcheck::guidance_gradients(10, 0)?);
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok(outcome(
        failed.is_empty(),
        format!("{} checks x 10 probes, worst relative error {worst:.2e} (limit 1e-4){}", checks.len(), list_failures(&failed)),
    ))
}

fn list_failures(names: &[&str]) -> String {
    if names.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", names.join(", "))
    }
}

fn background(report: &EvalReport, pairs: &[diffswap_core::pipeline::SwapPair], cfg: &SwapConfig) -> Result<Outcome> {
    let mut bad = 0;
    let mut checked = 0;
    for (r, p) in report.pairs.iter().zip(pairs) {
        let Some(rep) = &r.report else { continue };
        checked += 1;
        let w = feather_mask(&rep.mask, cfg.feather)?;
        let hw = w.len();
        bad += rep
            .output
            .data()
            .iter()
            .zip(p.target.data())
            .enumerate()
            .filter(|(i, (o, t))| w.data()[i % hw] == 0.0 && o.to_bits() != t.to_bits())
            .count();
    }
    Ok(outcome(
        checked == pairs.len() && bad == 0,
        format!("{checked}/{} swaps, {bad} differing pixels outside the feathered band", pairs.len()),
    ))
}

fn guidance_efficacy(guided: &EvalReport, plain: &EvalReport) -> Outcome {
    let mut wins = 0;
    let mut monotone = true;
    let mut traced = true;
    for (g, u) in guided.pairs.iter().zip(&plain.pairs) {
        if let (Some(a), Some(b)) = (g.final_lp, u.final_lp) {
            wins += usize::from(a <= b);
        }
        match &g.report {
            Some(r) => {
                monotone &= r.guidance.is_monotone();
                traced &= !r.guidance.entries.is_empty();
            }
            None => traced = false,
        }
    }
    let n = guided.pairs.len();
    outcome(
        wins as f64 >= 0.9 * n as f64 && monotone && traced,
        format!("guided final L_p no worse in {wins}/{n} swaps (need 90%), per-step monotone: {monotone}"),
    )
}

fn customization() -> Result<Outcome> {
    let cfg = SwapConfig::default();
    let ctx = SwapContext::standard(&cfg);
    let d = &*ctx.denoiser;
    let c = &cfg.customization;
    let source = render_image(&FaceParams::random(&mut Rng::new(77)), 64)?;
    let base_before = d.checksum();

    let t0 = Instant::now();
    let prior = build_prior_set(d, &c.class_prompt, c.prior_count, &c.prior_sampler)?;
    let (adapter, report) = train_lora_with_prior(d, &source, &prior, c)?;
    let secs = t0.elapsed().as_secs_f64();

    let init = IdentityAdapter::init(d, c);
    let probes = loss_probes(d, 16, 1);
    let inst = |a: &IdentityAdapter| probe_loss(d, a, &source, &c.instance_prompt, &probes);
    let prior_loss = |a: &IdentityAdapter| -> Result<f64> {
        let mut s = 0.0;
        for im in &prior {
            s += probe_loss(d, a, im, &c.class_prompt, &probes[..4])?;
        }
        Ok(s / prior.len() as f64)
    };
    let inst_ratio = inst(&adapter)? / inst(&init)?;
    let prior_ratio = prior_loss(&adapter)? / prior_loss(&init)?;
    let unchanged = d.checksum() == base_before && report.base_checksum == base_before;

    let src_emb = ctx.world.embed_id(&source)?;
    let mean_cos = |a: &IdentityAdapter| -> Result<f64> {
        let cond = a.condition(d, &c.instance_prompt, None, 0.0)?;
        let model = AdaptedDenoiser { denoiser: d, lora: Some(&a.lora) };
        let mut total = 0.0;
        for s in 0..10 {
            let sc = SamplerConfig { seed: 100 + s, ..SamplerConfig::default() };
            let x = sample(&model, &cond, &sc, d.schedule(), Hooks::default())?.map(|v| v.clamp(0.0, 1.0));
            total += ctx.world.embed_id(&x)?.dot(&src_emb)?;
        }
        Ok(total / 10.0)
    };
    let (cos_sks, cos_base) = (mean_cos(&adapter)?, mean_cos(&init)?);

    let passed = inst_ratio <= 0.5 && unchanged && cos_sks >= cos_base && prior_ratio <= 1.5 && secs < 120.0;
    Ok(outcome(
        passed,
        format!(
            "{} steps rank {}: instance loss x{inst_ratio:.3} (limit 0.5), base unchanged: {unchanged}, \
             sample cos {cos_sks:.3} vs base {cos_base:.3}, prior loss x{prior_ratio:.3} (limit 1.5), {secs:.1} s (limit 120)",
            report.total_loss.len(),
            c.lora_rank
        ),
    ))
}

fn trend(report: &EvalReport) -> Outcome {
    let (o, r) = (report.mean_output, report.mean_reference);
    let checks = [
        ("Expr", o.expr < r.expr),
        ("Pose", o.pose < r.pose),
        ("Shape", o.shape < r.shape),
        ("Cos", o.cos > r.cos),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty() && report.failed == 0,
        format!(
            "output cos {:.4} expr {:.4} pose {:.4} shape {:.4} vs reference cos {:.4} expr {:.4} pose {:.4} shape {:.4}{}",
            o.cos,
            o.expr,
            o.pose,
            o.shape,
            r.cos,
            r.expr,
            r.pose,
            r.shape,
            list_failures(&failed)
        ),
    )
}

fn metric_sanity() -> Result<Outcome> {
    let cfg = SwapConfig::default();
    let world = SwapContext::standard(&cfg).world;
    let mut rng = Rng::new(2024);
    let mut worst = [0.0f64; PARAM_DIM];
    for _ in 0..50 {
        let p = FaceParams::random(&mut rng);
        let est = estimate_params(&render_image(&p, 64)?, &cfg.estimator)?;
        for (w, (a, b)) in worst.iter_mut().zip(p.to_vec().iter().zip(est.params.to_vec())) {
            *w = w.max((a - b).abs());
        }
    }
    let worst_err = worst.iter().copied().fold(0.0, f64::max);
    let (same, cross) = world.identity_separation(100, 3)?;
    Ok(outcome(
        worst_err <= 0.05 && same >= 0.9 && cross <= 0.5,
        format!("worst parameter error {worst_err:.4} on 50 faces (limit 0.05), identity cosine same {same:.3} (min 0.9) cross {cross:.3} (max 0.5)"),
    ))
}

fn determinism(ctx: &SwapContext, cfg: &SwapConfig, pairs: &[diffswap_core::pipeline::SwapPair]) -> Result<Outcome> {
    let p = &pairs[0];
    let a = swap(ctx, &p.source, &p.target, &p.target_landmarks, cfg)?;
    let b = swap(ctx, &p.source, &p.target, &p.target_landmarks, cfg)?;
    let swap_same = a.same_result(&b);
    let sub = &pairs[..4];
    let e1 = evaluate(ctx, sub, cfg)?;
    let e2 = evaluate(ctx, sub, cfg)?;
    let outputs_same = e1.pairs.iter().zip(&e2.pairs).all(|(x, y)| match (&x.report, &y.report) {
        (Some(r), Some(s)) => r.same_result(s),
        (None, None) => true,
        _ => false,
    });
    let eval_same = outputs_same && e1.to_json() == e2.to_json();
    Ok(outcome(
        swap_same && eval_same,
        format!("swap repeat identical: {swap_same}, evaluate repeat over {} pairs identical: {eval_same}", sub.len()),
    ))
}

fn canny_and_control() -> Result<Outcome> {
    let cfg = CannyConfig::default();
    let empty = canny_edges(&Tensor::full(&[32, 32], 0.42), &cfg)?.sum() == 0.0;

    // Step edge: the detector must fire exactly where the central-difference
    // gradient of the blurred image peaks.
    let (h, w) = (24, 32);
    let step = Tensor::from_fn(&[h, w], |i| if i % w >= w / 2 { 1.0 } else { 0.0 });
    let edges = canny_edges(&step, &cfg)?;
    let b = gaussian_blur(&step, cfg.blur_sigma)?;
    let grad: Vec<f64> = (0..w)
        .map(|x| if x == 0 || x == w - 1 { 0.0 } else { (b.data()[x + 1] - b.data()[x - 1]).abs() / 2.0 })
        .collect();
    let peak = grad.iter().copied().fold(0.0, f64::max);
    let localized = (0..h * w).all(|i| (edges.data()[i] == 1.0) == (grad[i % w] > peak - 1e-12));

    let ctx_cfg = SwapConfig::default();
    let dcfg = SwapContext::standard(&ctx_cfg).denoiser.config().clone();
    let mut params = ControlParams::init(&dcfg, ctx_cfg.control_hidden, 5);
    params.randomize_outputs(1.0, 6);
    let [mh, mw, _] = dcfg.latent_size;
    let mut rng = Rng::new(8);
    let a = ConditionMap::new(ConditionKind::Canny, rng.uniform_tensor(&[mh, mw], 0.0, 1.0), 0.7)?;
    let bm = ConditionMap::new(ConditionKind::Annotation, rng.uniform_tensor(&[mh, mw], 0.0, 1.0), 1.3)?;
    let both = control_forward(&[a.clone(), bm.clone()], &params)?;
    let (ra, rb) = (control_forward(&[a], &params)?, control_forward(&[bm], &params)?);
    let mut err = 0.0f64;
    for ((s, x), y) in both.iter().zip(&ra).zip(&rb) {
        err = err.max(s.max_abs_diff(&x.add(y)?)?);
    }
    Ok(outcome(
        empty && localized && err <= 1e-12,
        format!("constant image empty: {empty}, step edge on gradient peak: {localized}, superposition error {err:.1e} (limit 1e-12)"),
    ))
}

fn report(n: usize, name: &str, r: Result<Outcome>, tally: &mut (usize, usize)) {
    match r {
        Ok(o) => {
            tally.0 += usize::from(o.passed);
            println!("{} {n}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        }
        Err(e) => {
            tally.1 += 1;
            println!("FAIL {n}. {name}: could not run: {e}");
        }
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut tally = (0, 0);
    report(1, "DDIM exactness", ddim(), &mut tally);
    report(2, "Gradient fidelity", gradients(), &mut tally);

    let cfg = SwapConfig::default();
    let ctx = SwapContext::standard(&cfg);
    let bench = synthetic_pairs(BENCH_PAIRS, BENCH_SOURCES, 64, BENCH_SEED).and_then(|pairs| {
        let guided = evaluate(&ctx, &pairs, &cfg)?;
        let plain_cfg = SwapConfig { guidance: GuidanceConfig::disabled(), ..cfg.clone() };
        let plain = evaluate(&ctx, &pairs, &plain_cfg)?;
        Ok((pairs, guided, plain))
    });
    match &bench {
        Ok((pairs, guided, plain)) => {
            report(3, "Background preservation", background(guided, pairs, &cfg), &mut tally);
            report(4, "Guidance efficacy", Ok(guidance_efficacy(guided, plain)), &mut tally);
            report(5, "Customization efficacy", customization(), &mut tally);
            report(6, "Metric trend", Ok(trend(guided)), &mut tally);
            print!("{}", guided.table());
        }
        Err(e) => {
            for (n, name) in [(3, "Background preservation"), (4, "Guidance efficacy"), (6, "Metric trend")] {
                tally.1 += 1;
                println!("FAIL {n}. {name}: could not run: {e}");
            }
            report(5, "Customization efficacy", customization(), &mut tally);
        }
    }
    report(7, "Metric sanity", metric_sanity(), &mut tally);
    let pairs = synthetic_pairs(4, 2, 64, BENCH_SEED);
    report(8, "Determinism", pairs.and_then(|p| determinism(&ctx, &cfg, &p)), &mut tally);
    report(9, "Canny and control linearity", canny_and_control(), &mut tally);
    println!("{}/9 criteria passed in {:.0} s", tally.0, t0.elapsed().as_secs_f64());
    if tally.1 > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
