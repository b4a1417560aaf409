use proptest::prelude::*;
use voxslice::attention::{gate_profile, seattention3d_forward, senet_forward, AttentionVariant, SeParams};
use voxslice::tensor::VoxelTensor;

fn channels_and_reduction() -> impl Strategy<Value = (usize, usize)> {
    prop::sample::select(vec![(2, 1), (2, 2), (4, 2), (4, 4), (8, 4), (8, 2)])
}

fn scaled(x: VoxelTensor, s: f64) -> VoxelTensor {
    x.map(|v| v * s)
}

fn bits(t: &VoxelTensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_height_layer_matches_senet_bitwise(
        (c, r) in channels_and_reduction(), b in 1usize..=3, x in 1usize..=5, y in 1usize..=5, seed in any::<u64>()
    ) {
        let input = VoxelTensor::random([b, c, x, y, 1], seed);
        let p = SeParams::random(c, r, seed ^ 1).unwrap();
        prop_assert_eq!(bits(&seattention3d_forward(&input, &p).unwrap()), bits(&senet_forward(&input, &p).unwrap()));
    }

    #[test]
    fn senet_gate_is_constant_over_height(
        (c, r) in channels_and_reduction(), b in 1usize..=2, z in 1usize..=8, seed in any::<u64>()
    ) {
        let input = VoxelTensor::random([b, c, 3, 2, z], seed);
        let p = SeParams::random(c, r, seed ^ 2).unwrap();
        let g = gate_profile(&input, &p, AttentionVariant::Global).unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let first = g.get(bi, ci, 0);
                prop_assert!((0..z).all(|zi| g.get(bi, ci, zi) == first));
            }
        }
        // gate recovered from the output is also z-constant
        let out = senet_forward(&input, &p).unwrap();
        for ci in 0..c {
            let ratio = |zi| out.get([0, ci, 0, 0, zi]) / input.get([0, ci, 0, 0, zi]);
            let r0 = ratio(0);
            prop_assert!((0..z).all(|zi| (ratio(zi) - r0).abs() <= 1e-12));
        }
    }

    #[test]
    fn gates_are_open_interval_and_shrink_inputs(
        (c, r) in channels_and_reduction(), z in 1usize..=8, scale in 0.1f64..50.0, seed in any::<u64>()
    ) {
        let input = scaled(VoxelTensor::random([2, c, 3, 3, z], seed), scale);
        let p = SeParams::random(c, r, seed ^ 3).unwrap();
        for variant in [AttentionVariant::HeightResolved, AttentionVariant::Global] {
            let g = gate_profile(&input, &p, variant).unwrap();
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let out = match variant {
                AttentionVariant::HeightResolved => seattention3d_forward(&input, &p).unwrap(),
                AttentionVariant::Global => senet_forward(&input, &p).unwrap(),
            };
            prop_assert!(out.data().iter().zip(input.data()).all(|(o, i)| o.abs() <= i.abs()));
        }
    }

    #[test]
    fn height_permutation_commutes_with_seattention3d(
        (c, r) in channels_and_reduction(),
        perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(),
        seed in any::<u64>()
    ) {
        let input = VoxelTensor::random([2, c, 3, 4, 8], seed);
        let p = SeParams::random(c, r, seed ^ 4).unwrap();
        let permuted_then_gated = seattention3d_forward(&input.permute_z(&perm), &p).unwrap();
        let gated_then_permuted = seattention3d_forward(&input, &p).unwrap().permute_z(&perm);
        prop_assert_eq!(bits(&permuted_then_gated), bits(&gated_then_permuted));
    }
}

#[test]
fn witness_has_height_varying_gates() {
    // channel 0 dominates the lower half of the column, channel 1 the upper half
    let input = VoxelTensor::from_fn([1, 4, 3, 3, 8], |[_, c, _, _, z]| match (c, z < 4) {
        (0, true) | (1, false) => 3.0,
        _ => 0.1,
    });
    let p = SeParams::random(4, 2, 5).unwrap();
    let g = gate_profile(&input, &p, AttentionVariant::HeightResolved).unwrap();
    let spread = (0..4)
        .map(|c| {
            let col: Vec<f64> = (0..8).map(|z| g.get(0, c, z)).collect();
            col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    assert!(spread > 0.01, "largest gate spread over height {spread}");
    let senet = gate_profile(&input, &p, AttentionVariant::Global).unwrap();
    assert!((0..4).all(|c| (0..8).all(|z| senet.get(0, c, z) == senet.get(0, c, 0))));
}
