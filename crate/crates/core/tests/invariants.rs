use nalgebra::DMatrix;
use proptest::prelude::*;

use tensor_ols::approx::approximate;
use tensor_ols::data_io::{encode_idx, parse_idx};
use tensor_ols::imaging::{gaussian_noise, patch_noise};
use tensor_ols::networks::{embed_student, random_teacher, WeightNorm};
use tensor_ols::orthopoly::{decompose, eigen_bounds};
use tensor_ols::{Activation, GradedOrder, MeasureSpec, MultiplicitiesSet};

/// Discrete measures on 3 to 5 distinct atoms in [-1, 1] with positive weights.
fn discrete_measure() -> impl Strategy<Value = MeasureSpec> {
    (3usize..=5)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(0.2f64..1.0, n), -0.3f64..0.3))
        .prop_map(|(n, w, shift)| {
            let support: Vec<f64> = (0..n)
                .map(|i| -0.9 + 1.6 * i as f64 / (n - 1) as f64 + shift * 0.1)
                .collect();
            let total: f64 = w.iter().sum();
            MeasureSpec::discrete_weighted(support, w.iter().map(|v| v / total).collect()).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covariance_factorizes_and_respects_bounds(spec in discrete_measure(), d in 1usize..=3, k in 1usize..=2) {
        let set = MultiplicitiesSet::build(d, k, spec.support_cardinality(), GradedOrder::GradedDescending).unwrap();
        let dec = decompose(&spec, &set).unwrap();
        let scale = dec.sigma.amax().max(1.0);
        prop_assert!(dec.reconstruction_error() <= 1e-9 * scale);
        prop_assert!((dec.det_v() - 1.0).abs() <= 1e-9);
        prop_assert!(dec.lower_triangle_max() <= 1e-12, "below-diagonal {:e}", dec.lower_triangle_max());

        let s = dec.spectrum();
        let b = eigen_bounds(&spec, k, d).unwrap();
        // c uses the half exponent; the squared constant is what holds off the symmetric grid
        let lb = b.c * b.c / b.monomial_count;
        prop_assert!(s.lambda_min >= lb * (1.0 - 1e-9), "{} < {}", s.lambda_min, lb);
        prop_assert!(s.lambda_max <= b.lambda_max_ub * (1.0 + 1e-9), "{} > {}", s.lambda_max, b.lambda_max_ub);
    }

    #[test]
    fn relu_approximant_meets_its_target(eps in 0.03f64..0.4) {
        let p = approximate(&Activation::Relu, eps).unwrap();
        prop_assert!(p.achieved_sup_error <= eps);
        let worst = (0..=2000)
            .map(|i| -1.0 + i as f64 / 1000.0)
            .map(|x| (p.eval(x) - x.max(0.0)).abs())
            .fold(0.0, f64::max);
        prop_assert!(worst <= eps, "grid error {worst} above {eps}");
    }

    #[test]
    fn l1_teacher_stays_in_unit_range(
        d in 1usize..6, depth in 1usize..4, width in 1usize..6, seed in 0u64..1000,
        x in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let net = random_teacher(d, depth, width, Activation::Relu, seed, WeightNorm::L1Rows, false).unwrap();
        prop_assert!(net.is_l1_normalized());
        let y = net.forward(&x[..d]).unwrap();
        prop_assert!(y.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_padding_preserves_the_function(
        d in 1usize..5, width in 1usize..5, extra in 1usize..4, seed in 0u64..1000,
        x in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let net = random_teacher(d, 2, width, Activation::Relu, seed, WeightNorm::L1Rows, false).unwrap();
        let big = embed_student(&net, width + extra).unwrap();
        prop_assert_eq!(big.width(), width + extra);
        prop_assert_eq!(net.forward(&x[..d]).unwrap(), big.forward(&x[..d]).unwrap());
    }

    #[test]
    fn idx_round_trips(dims in prop::collection::vec(1u32..5, 1..4), seed in any::<u8>()) {
        let len: u32 = dims.iter().product();
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let magic = 0x0800 | dims.len() as u32;
        let parsed = parse_idx(&encode_idx(magic, &dims, &payload), magic).unwrap();
        prop_assert_eq!(parsed.dims, dims);
        prop_assert_eq!(parsed.payload, payload);
    }

    #[test]
    fn noise_keeps_pixels_in_range(sigma in 0.0f64..1.0, area in 1.0f64..200.0, seed in 0u64..1000) {
        let image: Vec<f64> = (0..784).map(|i| (i % 17) as f64 / 16.0).collect();
        let g = gaussian_noise(&image, sigma, seed).unwrap();
        prop_assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));

        let p = patch_noise(&image, 28, 28, area, seed).unwrap();
        let blacked = p.iter().zip(&image).filter(|(a, b)| a != b).count();
        prop_assert!(p.iter().zip(&image).all(|(a, b)| a == b || *a == 0.0));
        prop_assert!(blacked as f64 <= area);
    }
}

#[test]
fn rademacher_covariance_is_identity() {
    let spec = MeasureSpec::rademacher();
    let set = MultiplicitiesSet::build(3, 3, spec.support_cardinality(), GradedOrder::GradedDescending).unwrap();
    let dec = decompose(&spec, &set).unwrap();
    let n = set.len();
    let eye = DMatrix::<f64>::identity(n, n);
    assert!((&dec.sigma - eye).amax() < 1e-12);
}

#[test]
fn half_exponent_lower_bound_fails_off_centre() {
    let w = 0.145_808_094_452_345_72;
    let spec = MeasureSpec::discrete_weighted(vec![-0.9, -0.1, 0.7], vec![w, 1.0 - 2.0 * w, w]).unwrap();
    let set = MultiplicitiesSet::build(1, 1, spec.support_cardinality(), GradedOrder::GradedDescending).unwrap();
    let s = decompose(&spec, &set).unwrap().spectrum();
    let b = eigen_bounds(&spec, 1, 1).unwrap();
    assert!(
        s.lambda_min < b.lambda_min_lb,
        "{} vs {}",
        s.lambda_min,
        b.lambda_min_lb
    );
    assert!(s.lambda_min >= b.c * b.c / b.monomial_count);
    assert!(s.lambda_max <= b.lambda_max_ub);
}
