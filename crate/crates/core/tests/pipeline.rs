use diffswap_core::customization::{CustomizationConfig, IdentityAdapter};
use diffswap_core::diffusion::SamplerConfig;
use diffswap_core::numerics::Tensor;
use diffswap_core::pipeline::{
    evaluate, swap_with_adapter, synthetic_pairs, train_identity, EvalReport, MetricRow, SwapConfig, SwapContext, SwapPair,
};

fn quick_config() -> SwapConfig {
    let sampler = SamplerConfig { num_steps: 9, ..SamplerConfig::default() };
    SwapConfig {
        customization: CustomizationConfig {
            train_steps: 10,
            prior_count: 2,
            prior_sampler: sampler.clone(),
            ..CustomizationConfig::default()
        },
        sampler,
        ..SwapConfig::default()
    }
}

#[test]
fn evaluate_reports_degenerate_and_broken_pairs() {
    let cfg = quick_config();
    let ctx = SwapContext::standard(&cfg);
    let mut pairs = synthetic_pairs(2, 2, 64, 3).unwrap();
    pairs[0].target = pairs[0].source.clone();
    pairs.push(SwapPair { source: Tensor::zeros(&[3, 32, 32]), ..pairs[1].clone() });
    let r = evaluate(&ctx, &pairs, &cfg).unwrap();
    assert_eq!((r.succeeded, r.failed), (2, 1));
    assert!(r.pairs[2].output.is_none() && r.pairs[2].error.is_some());

    // Source == target: the reference row is a perfect match.
    let same = r.pairs[0].reference;
    assert!((same.cos - 1.0).abs() < 1e-12);
    assert_eq!((same.expr, same.pose, same.shape), (0.0, 0.0, 0.0));

    // Means in the JSON agree with the per-pair rows it carries.
    let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    let rows: Vec<MetricRow> = back.pairs.iter().filter_map(|p| p.output).collect();
    let refs: Vec<MetricRow> = back.pairs.iter().filter(|p| p.output.is_some()).map(|p| p.reference).collect();
    assert_eq!(MetricRow::mean(&rows), back.mean_output);
    assert_eq!(MetricRow::mean(&refs), back.mean_reference);
    assert!(back.pairs.iter().all(|p| p.report.is_none()));
    assert!(r.table().lines().count() == 4 && r.table().contains("Cos↑"));
}

#[test]
fn saved_adapters_reproduce_the_swap() {
    let cfg = quick_config();
    let ctx = SwapContext::standard(&cfg);
    let p = &synthetic_pairs(1, 1, 64, 11).unwrap()[0];
    let (adapter, report) = train_identity(&ctx, &p.source, &cfg).unwrap();
    assert_eq!(report.total_loss.len(), cfg.customization.train_steps);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.json");
    adapter.save(&path).unwrap();
    let loaded = IdentityAdapter::load(&path).unwrap();
    assert_eq!(loaded.checksum(), adapter.checksum());
    let a = swap_with_adapter(&ctx, &adapter, &p.source, &p.target, &p.target_landmarks, &cfg).unwrap();
    let b = swap_with_adapter(&ctx, &loaded, &p.source, &p.target, &p.target_landmarks, &cfg).unwrap();
    assert!(a.same_result(&b));
    assert_eq!(a.output.shape(), &[3, 64, 64]);
    assert!(a.output.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn configs_round_trip_and_reject_unknown_fields() {
    let cfg = quick_config();
    let back: SwapConfig = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<SwapConfig>(r#"{"feathr": 2}"#).is_err());
    let partial: SwapConfig = serde_json::from_str(r#"{"feather": 5}"#).unwrap();
    assert_eq!(partial.feather, 5);
    assert_eq!(partial.sampler, SwapConfig::default().sampler);
}
