mod common;

use common::*;
use episcan::io::{format_field, parse_field};
use episcan::rng::stream_rng;
use episcan::{
    bootstrap_quantile, center_gram, enumerate_blocks, gram_euclidean, gram_indicator_cvm, p_value, scan_gram,
    scan_mean_change, Block, LatticeShape, MeanAssignment, ObservationField, PairPrefixTensor, PrefixTensor,
    ScanOptions, VolumeBounds, WeightSpec,
};
use proptest::prelude::*;

fn small_shape() -> impl Strategy<Value = LatticeShape> {
    prop_oneof![
        (1usize..=9).prop_map(|n| vec![n]),
        (1usize..=5, 1usize..=5).prop_map(|(a, b)| vec![a, b]),
        (1usize..=3, 1usize..=3, 1usize..=3).prop_map(|(a, b, c)| vec![a, b, c]),
    ]
    .prop_map(|dims| LatticeShape::new(dims).unwrap())
}

fn shape_and_block() -> impl Strategy<Value = (LatticeShape, Block)> {
    small_shape().prop_flat_map(|shape| {
        let axes: Vec<_> = shape.dims().iter().map(|&n| (0..n).prop_flat_map(move |lo| (Just(lo), lo + 1..=n))).collect();
        (Just(shape), axes).prop_map(|(s, pairs)| {
            let (lo, hi): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            (s, Block::new(lo, hi).unwrap())
        })
    })
}

fn field_for(shape: &LatticeShape, p: usize, seed: u64) -> ObservationField<f64> {
    normal_field(shape, p, &mut stream_rng(seed, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integer_box_sums_are_exact((shape, b) in shape_and_block(), seed in any::<u64>()) {
        let vals: Vec<i64> = (0..shape.len() as u64).map(|k| ((seed ^ k.wrapping_mul(0x9e37)) % 201) as i64 - 100).collect();
        let prefix = PrefixTensor::from_scalar_field(&shape, &vals).unwrap();
        let direct: i64 = (0..shape.len()).filter(|&f| b.contains(&shape.coords(f))).map(|f| vals[f]).sum();
        prop_assert_eq!(prefix.box_sum_scalar(&b).unwrap(), direct);
    }

    #[test]
    fn pair_box_sums_are_exact((shape, b) in shape_and_block(), seed in any::<u64>()) {
        let n = shape.len();
        let m: Vec<i64> = (0..(n * n) as u64).map(|k| ((seed ^ k.wrapping_mul(0x51f1)) % 17) as i64 - 8).collect();
        let pair = PairPrefixTensor::from_matrix(&shape, &m, 1 << 30).unwrap();
        let inside: Vec<usize> = (0..n).filter(|&f| b.contains(&shape.coords(f))).collect();
        let direct: i64 = inside.iter().flat_map(|&i| inside.iter().map(move |&j| (i, j))).map(|(i, j)| m[i * n + j]).sum();
        prop_assert_eq!(pair.pair_box_sum(&b).unwrap(), direct);
    }

    #[test]
    fn block_enumeration_matches_reference(shape in small_shape()) {
        let got: Vec<Block> = enumerate_blocks(&shape, None).collect();
        prop_assert_eq!(got.len() as u128, shape.block_count());
        prop_assert_eq!(got, all_blocks(shape.dims()));
    }

    #[test]
    fn scans_match_brute_force(shape in small_shape(), p in 1usize..=2, seed in any::<u64>()) {
        prop_assume!(shape.len() >= 2);
        let field = field_for(&shape, p, seed);
        let opts = ScanOptions::default();
        let (want, block) = brute_mean_scan(&field);
        let got = scan_mean_change(&field, &opts).unwrap();
        prop_assert!(rel_close(got.max_squared, want, 1e-9), "{} vs {}", got.max_squared, want);
        prop_assert_eq!(&got.argmax_block, &block);
        let w = WeightSpec::repeated(standard_normal_weight(), p).unwrap();
        let cvm = scan_gram(&gram_indicator_cvm(&field, &w).unwrap(), &opts).unwrap();
        let (want, block) = brute_gram_scan(&shape, &indicator_gram(&field));
        prop_assert!(rel_close(cvm.max_squared, want, 1e-9));
        prop_assert_eq!(cvm.argmax_block, block);
    }

    #[test]
    fn mean_scan_is_quadratic_in_scale(shape in small_shape(), seed in any::<u64>(), c in 0.1f64..10.0) {
        prop_assume!(shape.len() >= 2);
        let field = field_for(&shape, 1, seed);
        let opts = ScanOptions::default();
        let a = scan_mean_change(&field, &opts).unwrap();
        let b = scan_mean_change(&field.map(|x| c * x).unwrap(), &opts).unwrap();
        prop_assert!(rel_close(b.max_squared, c * c * a.max_squared, 1e-9));
        prop_assert!(a.max_squared >= 0.0);
    }

    #[test]
    fn bounded_scan_respects_bounds(seed in any::<u64>(), eps1 in 0.0f64..0.4, eps2 in 0.0f64..0.4) {
        let shape = LatticeShape::cube(2, 5).unwrap();
        let field = field_for(&shape, 1, seed);
        let bounds = VolumeBounds::from_fractions(eps1, eps2, shape.len()).unwrap();
        let opts = ScanOptions { bounds: Some(bounds), ..ScanOptions::default() };
        let r = scan_mean_change(&field, &opts).unwrap();
        prop_assert!(bounds.contains(r.argmax_block.volume()));
        prop_assert_eq!(r.blocks_evaluated, enumerate_blocks(&shape, Some(bounds)).count() as u64);
    }

    #[test]
    fn centred_gram_rows_sum_to_zero(shape in small_shape(), seed in any::<u64>()) {
        let field = field_for(&shape, 2, seed);
        for g in [gram_euclidean(&field), gram_indicator_cvm(&field, &WeightSpec::gaussian(0.0, 1.0, 2).unwrap()).unwrap()] {
            let c = center_gram(&g, &MeanAssignment::Global).unwrap();
            let scale = g.entries().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for r in c.row_sums() {
                prop_assert!(r.abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn threshold_and_p_value_agree(values in prop::collection::vec(0.0f64..10.0, 1..300), t in 0.0f64..10.0, alpha in 0.001f64..0.5) {
        let thr = bootstrap_quantile(&values, alpha).unwrap();
        // p <= alpha forces T above the quantile.
        if p_value(t, &values) <= alpha {
            prop_assert!(t >= thr);
        }
        let looser = bootstrap_quantile(&values, (alpha * 1.5).min(0.99)).unwrap();
        prop_assert!(looser <= thr);
    }

    #[test]
    fn csv_round_trip_is_bit_exact(shape in small_shape(), p in 1usize..=3, seed in any::<u64>()) {
        let field = field_for(&shape, p, seed).map(|x| x * 1e3 + 1e-7).unwrap();
        let text = format_field(&field).unwrap();
        let back = parse_field(text.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), field.shape());
        for (a, b) in field.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
