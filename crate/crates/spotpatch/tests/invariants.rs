//! Property-based invariants: mask packing, container codec, footprint
//! decomposition, and scoring.

use proptest::prelude::*;
use spotpatch::decathlon;
use spotpatch::format::{
    bitsize_gamma, deserialize, pack_mask, patch_components, serialize, unpack_mask, BitMode,
    DeployedPatch, GatedPayload, LayerEntry,
};
use spotpatch::patching::BnParams;
use spotpatch::Tensor;

fn arb_patch() -> impl Strategy<Value = DeployedPatch> {
    let gated = (any::<f32>().prop_filter("finite", |v| v.is_finite()), prop::collection::vec(any::<bool>(), 0..40))
        .prop_map(|(omega, mask)| GatedPayload { omega, mask });
    let bn = (1usize..5).prop_map(|channels| {
        let t = |v: f32| Tensor::full(vec![channels], v);
        BnParams {
            scale: t(1.5),
            shift: t(-0.25),
            running_mean: t(0.125),
            running_var: t(2.0),
        }
    });
    let entry = (any::<u16>(), prop::option::of(gated), prop::option::of(bn)).prop_map(
        |(layer_id, gated, bn)| LayerEntry {
            layer_id,
            gated,
            bn,
        },
    );
    prop::collection::vec(entry, 0..6).prop_map(|layers| DeployedPatch { layers })
}

proptest! {
    #[test]
    fn mask_pack_unpack_round_trips(bits in prop::collection::vec(any::<bool>(), 0..70)) {
        let packed = pack_mask(&bits);
        prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
        prop_assert_eq!(unpack_mask(&packed, bits.len()), bits);
    }

    #[test]
    fn mask_padding_bits_are_zero(bits in prop::collection::vec(any::<bool>(), 1..70)) {
        let packed = pack_mask(&bits);
        let used = bits.len() % 8;
        if used != 0 {
            let last = packed[packed.len() - 1];
            prop_assert_eq!(last >> used, 0, "padding bits must stay clear");
        }
    }

    #[test]
    fn codec_round_trips(patch in arb_patch()) {
        let bytes = serialize(&patch);
        let decoded = deserialize(&bytes).unwrap();
        prop_assert_eq!(&decoded, &patch);
        // byte-exact: re-serializing the decoded patch reproduces the input
        prop_assert_eq!(serialize(&decoded), bytes);
    }

    #[test]
    fn truncated_container_is_rejected(patch in arb_patch(), cut_frac in 0.0f64..1.0) {
        let bytes = serialize(&patch);
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        if cut < bytes.len() {
            prop_assert!(deserialize(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn base8_bits_decompose_exactly(patch in arb_patch()) {
        // bitsize under 8-bit floats = mask bits + 8 * float params; cross-check
        // in exact integer arithmetic.
        let (mask_bits, float_params) = patch_components(&patch);
        prop_assert_eq!(bitsize_gamma(&patch, BitMode::Base8) as u128,
            mask_bits as u128 + 8u128 * float_params as u128);
        prop_assert_eq!(bitsize_gamma(&patch, BitMode::Base32) as u128,
            mask_bits as u128 + 32u128 * float_params as u128);
    }

    #[test]
    fn score_is_monotone_in_each_task(
        maps in prop::collection::vec(0.0f64..1.0, 2..8),
        ft in prop::collection::vec(0.01f64..0.99, 2..8),
        bump in 0.0f64..0.5,
        which in any::<prop::sample::Index>(),
    ) {
        let n = maps.len().min(ft.len());
        let (maps, ft) = (&maps[..n], &ft[..n]);
        let b = decathlon::baseline_from_finetune(ft).unwrap();
        let base = decathlon::score(maps, &b).unwrap();
        let mut better = maps.to_vec();
        let i = which.index(n);
        better[i] = (better[i] + bump).min(1.0);
        let improved = decathlon::score(&better, &b).unwrap();
        prop_assert!(improved >= base - 1e-12);
    }

    #[test]
    fn score_is_permutation_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, 0.01f64..0.99), 2..8),
        shuffle in any::<u64>(),
    ) {
        let maps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ft: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let b = decathlon::baseline_from_finetune(&ft).unwrap();
        let original = decathlon::score(&maps, &b).unwrap();
        // deterministic pseudo-shuffle of task order
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&i| (i as u64).wrapping_mul(shuffle | 1).rotate_left(17));
        let maps2: Vec<f64> = order.iter().map(|&i| maps[i]).collect();
        let b2: Vec<f64> = order.iter().map(|&i| b[i]).collect();
        let permuted = decathlon::score(&maps2, &b2).unwrap();
        prop_assert!((original - permuted).abs() < 1e-9);
    }

    #[test]
    fn score_stays_in_range(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.01f64..0.99), 2..8),
    ) {
        let maps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ft: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let b = decathlon::baseline_from_finetune(&ft).unwrap();
        let s = decathlon::score(&maps, &b).unwrap();
        prop_assert!((0.0..=10000.0 + 1e-9).contains(&s));
    }
}
