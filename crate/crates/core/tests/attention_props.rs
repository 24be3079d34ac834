use gape_lab::attention::{attend, kv_cache_shapes, MaskPath};
use gape_lab::numerics::Rng;
use gape_lab::posenc::EncodingKind;
use gape_lab::theory::suites::random_gated_inputs;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn three_mask_paths_agree(seed in any::<u64>()) {
        let inputs = random_gated_inputs(&mut Rng::new(seed), 48);
        let reference = attend(&inputs, MaskPath::ExplicitM).unwrap().weights;
        for path in [MaskPath::ExplicitMHat, MaskPath::FusedAugmented] {
            let w = attend(&inputs, path).unwrap().weights;
            prop_assert!(reference.max_abs_diff(&w).unwrap() < 1e-10, "{:?}", path);
        }
    }

    #[test]
    fn rows_are_causal_distributions(seed in any::<u64>()) {
        let inputs = random_gated_inputs(&mut Rng::new(seed), 32);
        let w = attend(&inputs, MaskPath::FusedAugmented).unwrap().weights;
        for i in 0..w.rows() {
            let row = w.row(i);
            prop_assert!((row[..=i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[..=i].iter().all(|&p| p >= 0.0));
            prop_assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn weights_ignore_a_common_position_shift(seed in any::<u64>(), shift in 1usize..4000) {
        let inputs = random_gated_inputs(&mut Rng::new(seed), 32);
        let mut shifted = inputs.clone();
        for p in shifted.positions.iter_mut() {
            *p += shift;
        }
        for path in MaskPath::ALL {
            let a = attend(&inputs, path).unwrap().weights;
            let b = attend(&shifted, path).unwrap().weights;
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9, "{:?}", path);
        }
    }

    #[test]
    fn kv_cache_matches_rotary_baseline(heads in 1usize..16, half in 2usize..64, ctx in 0usize..8192, batch in 1usize..4) {
        let d = 2 * half;
        let a = kv_cache_shapes(&EncodingKind::rope(), false, batch, ctx, heads, d).unwrap();
        let b = kv_cache_shapes(&EncodingKind::rope(), true, batch, ctx, heads, d).unwrap();
        prop_assert_eq!(a, b);
    }
}
