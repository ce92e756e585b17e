use proptest::prelude::*;

use diffswap_core::numerics::{check_gradient, Rng, Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_expression_gradients_match_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = rng.normal_tensor(&[4, 3]);
        let k = rng.normal_tensor(&[5, 3]);
        let x = rng.normal_tensor(&[2, 4]);
        let err = check_gradient(
            |tape, xv| {
                let h = xv.matmul(tape.constant(w.clone()))?.tanh();
                let keys = tape.constant(k.clone());
                let att = h.matmul_nt(keys)?.softmax(1)?.matmul(keys)?;
                Ok(att.silu().square().sum())
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn adjoint_of_matmul_is_transposed_product(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = rng.normal_tensor(&[3, 4]);
        let b = rng.normal_tensor(&[4, 2]);
        let g = rng.normal_tensor(&[3, 2]);
        let tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        av.matmul(bv).unwrap().mul(tape.constant(g.clone())).unwrap().sum().backward().unwrap();
        let ga = g.matmul(&b.transpose().unwrap()).unwrap();
        let gb = a.transpose().unwrap().matmul(&g).unwrap();
        prop_assert!(av.grad().unwrap().max_abs_diff(&ga).unwrap() < 1e-12);
        prop_assert!(bv.grad().unwrap().max_abs_diff(&gb).unwrap() < 1e-12);
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), n in 1usize..64) {
        let (a, b) = (Rng::new(seed).normal_tensor(&[n]), Rng::new(seed).normal_tensor(&[n]));
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        prop_assert_eq!(a, b);
    }
}

#[test]
fn conv_gradient_matches_differences() {
    let mut rng = Rng::new(9);
    let w = rng.normal_tensor(&[2, 3, 3, 3]);
    let x = rng.normal_tensor(&[3, 6, 6]);
    let err = check_gradient(|tape, xv| Ok(xv.conv2d(tape.constant(w.clone()), None, 1)?.tanh().sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
    let zero = Tensor::zeros(&[3, 6, 6]);
    assert_eq!(check_gradient(|_, xv| Ok(xv.sum()), &zero, 1e-5).unwrap(), 0.0);
}
