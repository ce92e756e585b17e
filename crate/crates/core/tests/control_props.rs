use proptest::prelude::*;

use diffswap_core::control::{
    annotation_map, canny_edges, control_forward, CannyConfig, ConditionKind, ConditionMap, ControlParams, Landmarks,
};
use diffswap_core::denoiser::DenoiserConfig;
use diffswap_core::numerics::{Rng, Tensor};

// Multiples of 1/64 below 4 keep every Sobel sum exact, so an added
// constant cancels bit for bit.
fn dyadic_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[h, w], |_| rng.below(64) as f64 / 64.0)
}

const NAMES: [&str; 10] = [
    "left_eye",
    "right_eye",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "lip_top",
    "lip_bottom",
    "left_brow_outer",
    "left_brow_inner",
    "right_brow_inner",
];

fn random_map(cfg: &DenoiserConfig, kind: ConditionKind, seed: u64, weight: f64) -> ConditionMap {
    let [h, w, _] = cfg.latent_size;
    ConditionMap::new(kind, Rng::new(seed).uniform_tensor(&[h, w], 0.0, 1.0), weight).unwrap()
}

fn live_params(cfg: &DenoiserConfig, seed: u64) -> ControlParams {
    let mut p = ControlParams::init(cfg, 4, seed);
    p.randomize_outputs(1.0, seed + 1);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_images_have_no_edges(h in 3usize..24, w in 3usize..24, v in 0.0f64..1.0, sigma in 0.0f64..2.0) {
        let cfg = CannyConfig { blur_sigma: sigma, ..CannyConfig::default() };
        prop_assert_eq!(canny_edges(&Tensor::full(&[h, w], v), &cfg).unwrap().sum(), 0.0);
    }

    #[test]
    fn edges_ignore_a_constant_offset(h in 4usize..20, w in 4usize..20, seed in any::<u64>(), k in 1usize..64) {
        let img = dyadic_image(h, w, seed);
        let cfg = CannyConfig { blur_sigma: 0.0, ..CannyConfig::default() };
        let shifted = img.map(|v| v + k as f64 / 64.0);
        prop_assert_eq!(canny_edges(&img, &cfg).unwrap(), canny_edges(&shifted, &cfg).unwrap());
    }

    #[test]
    fn edge_maps_are_binary(seed in any::<u64>()) {
        let img = Rng::new(seed).uniform_tensor(&[16, 16], 0.0, 1.0);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        prop_assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn control_superposes(s1 in any::<u64>(), s2 in any::<u64>(), w1 in 0.0f64..2.0, w2 in 0.0f64..2.0) {
        let cfg = DenoiserConfig::tiny();
        let p = live_params(&cfg, 7);
        let a = random_map(&cfg, ConditionKind::Canny, s1, w1);
        let b = random_map(&cfg, ConditionKind::Annotation, s2, w2);
        let both = control_forward(&[a.clone(), b.clone()], &p).unwrap();
        let ra = control_forward(&[a], &p).unwrap();
        let rb = control_forward(&[b], &p).unwrap();
        for ((s, x), y) in both.iter().zip(&ra).zip(&rb) {
            prop_assert!(s.max_abs_diff(&x.add(y).unwrap()).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn control_scales_with_weight(seed in any::<u64>(), w in 0.0f64..3.0) {
        let cfg = DenoiserConfig::tiny();
        let p = live_params(&cfg, 3);
        let one = control_forward(&[random_map(&cfg, ConditionKind::Canny, seed, 1.0)], &p).unwrap();
        let scaled = control_forward(&[random_map(&cfg, ConditionKind::Canny, seed, w)], &p).unwrap();
        for (a, b) in one.iter().zip(&scaled) {
            prop_assert!(b.max_abs_diff(&a.scale(w)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn annotations_are_binary_and_shift_with_landmarks(
        pts in proptest::collection::vec((32u32..96, 32u32..96), NAMES.len()),
        dx in 0usize..8,
        dy in 0usize..8,
    ) {
        // Quarter-pixel coordinates keep the translated distances exact.
        let mut lm = Landmarks::new();
        for (name, (x, y)) in NAMES.iter().zip(&pts) {
            lm.insert(name, [*x as f64 / 4.0, *y as f64 / 4.0]);
        }
        let a = annotation_map(&lm, 40, 40).unwrap();
        let b = annotation_map(&lm.translated(dx as f64, dy as f64), 40, 40).unwrap();
        prop_assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for y in 0..40 - dy {
            for x in 0..40 - dx {
                prop_assert_eq!(a.data()[y * 40 + x], b.data()[(y + dy) * 40 + x + dx]);
            }
        }
    }
}

#[test]
fn untrained_control_is_silent() {
    let cfg = DenoiserConfig::tiny();
    let p = ControlParams::init(&cfg, 4, 1);
    let r = control_forward(&[random_map(&cfg, ConditionKind::Canny, 2, 1.0)], &p).unwrap();
    assert!(r.iter().all(|t| t.max_abs() == 0.0));
}
