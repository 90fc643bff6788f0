use std::collections::BTreeSet;

use csiforge::quantizer::{
    allocate_bits, class_set, pack_bits, quantize_levels, unpack_bits, CsiBitstream, QuantizerParams,
    TernaryLevelVector,
};
use proptest::prelude::*;

/// Level sums reached by enumerating every count of observed `+1` entries.
fn enumerated_sums(bits: u32, b_max: u32) -> BTreeSet<i64> {
    let k = (1i64 << b_max) - 1;
    let a = 1i64 << (b_max - bits);
    (0..(1i64 << bits)).map(|m| m * a - (k - m * a - (a - 1))).collect()
}

fn sorted_boundaries(raw: Vec<f64>) -> Vec<f64> {
    let mut b = raw;
    b.sort_by(f64::total_cmp);
    b
}

fn boundaries(b_max: u32) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, (1usize << b_max) - 1).prop_map(sorted_boundaries)
}

proptest! {
    #[test]
    fn pack_unpack_identity(b_max in 1u32..=4, z in -6.0f64..6.0, seed_bits in 1u32..=4, raw in prop::collection::vec(-4.0f64..4.0, 15)) {
        let k = (1usize << b_max) - 1;
        let bnd = sorted_boundaries(raw[..k].to_vec());
        let bits = 1 + (seed_bits - 1) % b_max;
        let levels = quantize_levels(z, &bnd, bits, b_max);
        prop_assert!(levels.is_valid_at(bits, b_max));
        let code = pack_bits(&levels, bits).unwrap();
        prop_assert_eq!(code.len(), bits as usize);
        prop_assert_eq!(unpack_bits(&code, b_max).unwrap(), levels.clone());
        prop_assert!(class_set(bits, b_max).contains(&levels.level_sum()));
    }

    #[test]
    fn level_sum_is_monotone_in_z(bnd in boundaries(3), z1 in -6.0f64..6.0, dz in 0.0f64..3.0, bits in 1u32..=3) {
        let lo = quantize_levels(z1, &bnd, bits, 3).level_sum();
        let hi = quantize_levels(z1 + dz, &bnd, bits, 3).level_sum();
        prop_assert!(lo <= hi);
    }

    #[test]
    fn full_rate_sum_counts_boundaries(bnd in boundaries(3), z in -6.0f64..6.0) {
        let below = bnd.iter().filter(|&&b| z >= b).count() as i64;
        prop_assert_eq!(quantize_levels(z, &bnd, 3, 3).level_sum(), 2 * below - 7);
    }

    #[test]
    fn bitstream_bytes_roundtrip(n in 1usize..40, extra in 0usize..200, zs in prop::collection::vec(-5.0f64..5.0, 40), bnd in boundaries(3)) {
        let total = n + extra % (2 * n + 1);
        let alloc = allocate_bits(total, n, 3).unwrap();
        prop_assert_eq!(alloc.total(), total);
        let levels: Vec<TernaryLevelVector> = (0..n).map(|i| quantize_levels(zs[i], &bnd, alloc.bits[i], 3)).collect();
        let s = CsiBitstream::from_levels(&levels, alloc).unwrap();
        let back = CsiBitstream::from_bytes(&s.to_bytes(), total, n, 3).unwrap();
        prop_assert_eq!(back.levels(), levels);
    }

    #[test]
    fn materialized_boundaries_never_decrease(first in -3.0f64..3.0, pseudo in prop::collection::vec(-1.0f64..1.0, 6)) {
        let p = QuantizerParams::new(
            3,
            csiforge::diffcore::Tensor::vector(vec![first]),
            csiforge::diffcore::Tensor::new(vec![1, 6], pseudo).unwrap(),
        )
        .unwrap();
        let grid = p.materialize_boundaries();
        prop_assert!(grid.row(0).windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(grid.row(0)[0], first);
    }
}

#[test]
fn class_sets_match_enumeration_and_are_disjoint() {
    for b_max in 1..=4u32 {
        for bits in 1..=b_max {
            assert_eq!(
                class_set(bits, b_max),
                enumerated_sums(bits, b_max),
                "bits={bits} b_max={b_max}"
            );
        }
        for a in 1..=b_max {
            for b in a + 1..=b_max {
                assert!(class_set(a, b_max).is_disjoint(&class_set(b, b_max)));
            }
        }
    }
}
