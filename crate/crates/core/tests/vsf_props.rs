use proptest::prelude::*;
use voxslice::attention::{seattention3d_forward, senet_forward, AttentionVariant, SeParams};
use voxslice::ops::{self, Pointwise};
use voxslice::params::{ModuleParams, Param};
use voxslice::tape::Tape;
use voxslice::tensor::VoxelTensor;
use voxslice::vsf::{
    default_partition, init_vsf, local_gated, slice_z, uniform_partition, unslice_z, vsf_forward, vsf_traced,
    HeightPartition, VsfMode, VsfSpec, Z_MAX_M, Z_MIN_M,
};

const PREFIX: &str = "vsf";

fn assert_tiles(p: &HeightPartition) {
    let mut next = 0;
    for &(lo, hi) in p.ranges() {
        assert_eq!(lo, next, "ranges must be contiguous");
        assert!(hi > lo, "ranges must be nonempty");
        next = hi;
    }
    assert_eq!(next, p.z());
}

#[test]
fn default_partition_voxel_ranges() {
    let p = default_partition(16).unwrap();
    assert_eq!(p.ranges(), &[(0, 4), (4, 6), (6, 8), (8, 10), (10, 12), (12, 16)]);
    assert_eq!(p.widths(), vec![4, 2, 2, 2, 2, 4]);
    assert_tiles(&p);
    assert_eq!(default_partition(32).unwrap().widths(), vec![8, 4, 4, 4, 4, 8]);
    assert!(default_partition(12).is_err());
}

#[test]
fn uniform_partitions_match_ablation_interval_sets() {
    let eight = uniform_partition(16, 8).unwrap();
    let expect8: Vec<(f64, f64)> = (0..8).map(|i| (-5.0 + i as f64, -4.0 + i as f64)).collect();
    assert_eq!(eight.intervals(), expect8.as_slice());
    assert!(eight.widths().iter().all(|&w| w == 2));
    let four = uniform_partition(16, 4).unwrap();
    assert_eq!(four.intervals(), &[(-5.0, -3.0), (-3.0, -1.0), (-1.0, 1.0), (1.0, 3.0)]);
    assert_eq!(four.ranges(), &[(0, 4), (4, 8), (8, 12), (12, 16)]);
    assert_eq!(uniform_partition(16, 1).unwrap().ranges(), &[(0, 16)]);
    assert!(uniform_partition(16, 3).is_err());
    for p in [eight, four] {
        assert_tiles(&p);
    }
}

proptest! {
    #[test]
    fn constructed_partitions_tile_the_grid(widths in prop::collection::vec(1usize..=5, 1..=8)) {
        let p = HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &widths).unwrap();
        assert_tiles(&p);
        prop_assert_eq!(p.widths(), widths);
        let rebuilt = HeightPartition::from_intervals(Z_MIN_M, Z_MAX_M, p.intervals(), p.z()).unwrap();
        prop_assert_eq!(rebuilt.ranges(), p.ranges());
    }

    #[test]
    fn slicing_round_trips_bitwise(widths in prop::collection::vec(1usize..=4, 1..=5), seed in any::<u64>()) {
        let p = HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &widths).unwrap();
        let x = VoxelTensor::random([2, 3, 2, 3, p.z()], seed);
        let slices: Vec<VoxelTensor> = p.ranges().iter().map(|&r| slice_z(&x, r).unwrap()).collect();
        prop_assert_eq!(unslice_z(&slices, &p).unwrap(), x);
    }
}

fn model(
    c: usize,
    r: usize,
    mode: VsfMode,
    attention: AttentionVariant,
    part: &HeightPartition,
    seed: u64,
) -> (VsfSpec, ModuleParams) {
    let spec = VsfSpec { channels: c, reduction: r, attention, mode };
    let mut params = ModuleParams::new(seed);
    init_vsf(&mut params, PREFIX, &spec, part.len()).unwrap();
    (spec, params)
}

fn get(params: &ModuleParams, name: &str) -> Param {
    params.get(&format!("{PREFIX}.{name}")).unwrap().clone()
}

fn conv(x: &VoxelTensor, params: &ModuleParams, name: &str) -> VoxelTensor {
    ops::conv3d(x, &get(params, &format!("{name}.weight")), &get(params, &format!("{name}.bias"))).unwrap()
}

fn se(x: &VoxelTensor, params: &ModuleParams, name: &str, spec: &VsfSpec) -> VoxelTensor {
    let p = SeParams::from_params(params, &format!("{PREFIX}.{name}"), spec.reduction).unwrap();
    match spec.attention {
        AttentionVariant::HeightResolved => seattention3d_forward(x, &p).unwrap(),
        AttentionVariant::Global => senet_forward(x, &p).unwrap(),
    }
}

fn times_map(x: &VoxelTensor, map: &VoxelTensor) -> VoxelTensor {
    VoxelTensor::new(x.dims(), ops::mul_map_forward(x.dims(), x.data(), map.data())).unwrap()
}

/// The fusion block recomposed from eager building blocks.
fn reference(x: &VoxelTensor, params: &ModuleParams, spec: &VsfSpec, part: &HeightPartition) -> VoxelTensor {
    if spec.mode == VsfMode::None {
        return x.clone();
    }
    let global = || conv(&se(x, params, "global.se", spec), params, "global.merge");
    let local = || {
        let slabs: Vec<VoxelTensor> = part
            .ranges()
            .iter()
            .enumerate()
            .map(|(i, &r)| se(&slice_z(x, r).unwrap(), params, &format!("local.{i}.se"), spec))
            .collect();
        conv(&unslice_z(&slabs, part).unwrap(), params, "local.merge")
    };
    let fused = match spec.mode {
        VsfMode::GlobalOnly => global(),
        VsfMode::LocalOnly => local(),
        VsfMode::ConcatFusion => conv(&ops::concat_channels(&global(), &local()).unwrap(), params, "fuse"),
        VsfMode::Full => {
            let (g, l) = (global(), local());
            let ag = ops::pointwise(&conv(&g, params, "map_global"), Pointwise::Sigmoid);
            let al = ops::pointwise(&conv(&l, params, "map_local"), Pointwise::Sigmoid);
            let cat = ops::concat_channels(&times_map(&g, &al), &times_map(&l, &ag)).unwrap();
            conv(&cat, params, "fuse")
        }
        VsfMode::None => unreachable!(),
    };
    se(&fused, params, "fuse.se", spec)
}

fn modes() -> impl Strategy<Value = VsfMode> {
    prop::sample::select(VsfMode::ALL.to_vec())
}

fn variants() -> impl Strategy<Value = AttentionVariant> {
    prop::sample::select(vec![AttentionVariant::HeightResolved, AttentionVariant::Global])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_matches_reference_composition(
        mode in modes(), attention in variants(), widths in prop::collection::vec(1usize..=3, 1..=4), seed in any::<u64>()
    ) {
        let part = HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &widths).unwrap();
        let (spec, params) = model(4, 2, mode, attention, &part, seed);
        let x = VoxelTensor::random([2, 4, 3, 2, part.z()], seed ^ 1);
        let got = vsf_forward(&x, &params, PREFIX, &spec, &part).unwrap();
        let want = reference(&x, &params, &spec, &part);
        prop_assert_eq!(got.dims(), x.dims());
        prop_assert!(got.max_abs_diff(&want) <= 1e-12, "diff {}", got.max_abs_diff(&want));
    }

    #[test]
    fn outputs_stay_bounded_and_finite(mode in modes(), scale in 1.0f64..1e3, seed in any::<u64>()) {
        let part = default_partition(16).unwrap();
        let (spec, params) = model(4, 4, mode, AttentionVariant::HeightResolved, &part, seed);
        let x = VoxelTensor::random([1, 4, 3, 3, 16], seed ^ 2).map(|v| v * scale);
        let out = vsf_forward(&x, &params, PREFIX, &spec, &part).unwrap();
        prop_assert!(out.is_finite());
        let max_in = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // each conv's infinity-norm row sum and bias bound its output given a bounded input
        let bound = |name: &str, m: f64| {
            let w = get(&params, &format!("{name}.weight"));
            let b = get(&params, &format!("{name}.bias"));
            let row = w.values.len() / w.shape[0];
            w.values.chunks(row).zip(&b.values).map(|(r, bi)| r.iter().map(|v| v.abs()).sum::<f64>() * m + bi.abs()).fold(0.0, f64::max)
        };
        let limit = match mode {
            VsfMode::None => max_in,
            VsfMode::GlobalOnly => bound("global.merge", max_in),
            VsfMode::LocalOnly => bound("local.merge", max_in),
            VsfMode::ConcatFusion | VsfMode::Full => {
                bound("fuse", bound("global.merge", max_in).max(bound("local.merge", max_in)))
            }
        };
        let max_out = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_out <= limit * (1.0 + 1e-12), "{} > {}", max_out, limit);
    }

    #[test]
    fn slab_permutation_permutes_gated_features(
        widths in prop::collection::vec(1usize..=3, 2..=5), shuffle_seed in any::<u64>(), seed in any::<u64>()
    ) {
        let part = HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &widths).unwrap();
        let (spec, params) = model(4, 2, VsfMode::LocalOnly, AttentionVariant::HeightResolved, &part, seed);
        let x = VoxelTensor::random([1, 4, 3, 3, part.z()], seed ^ 3);
        // order[j] = old slab placed at new position j
        let mut order: Vec<usize> = (0..widths.len()).collect();
        order.sort_by_key(|&i| (i as u64 ^ shuffle_seed).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let new_widths: Vec<usize> = order.iter().map(|&i| widths[i]).collect();
        let new_part = HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &new_widths).unwrap();
        let z_perm: Vec<usize> = order.iter().flat_map(|&i| { let (lo, hi) = part.ranges()[i]; lo..hi }).collect();
        let mut moved = ModuleParams::new(seed);
        for (j, &i) in order.iter().enumerate() {
            SeParams::from_params(&params, &format!("{PREFIX}.local.{i}.se"), 2).unwrap()
                .insert_into(&mut moved, &format!("{PREFIX}.local.{j}.se")).unwrap();
        }
        let gated = |x: &VoxelTensor, p: &ModuleParams, part: &HeightPartition| {
            let mut t = Tape::new();
            let v = t.constant(x);
            let g = local_gated(&mut t, v, p, PREFIX, &spec, part).unwrap();
            t.to_voxel(g).unwrap()
        };
        let a = gated(&x.permute_z(&z_perm), &moved, &new_part);
        let b = gated(&x, &params, &part).permute_z(&z_perm);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn perturbing_one_slab_only_changes_that_slab(slab in 0usize..6, seed in any::<u64>()) {
        let part = default_partition(16).unwrap();
        let (spec, params) = model(4, 2, VsfMode::LocalOnly, AttentionVariant::HeightResolved, &part, seed);
        let x = VoxelTensor::random([1, 4, 3, 3, 16], seed ^ 4);
        let (lo, hi) = part.ranges()[slab];
        let bumped = VoxelTensor::from_fn(x.dims(), |i| x.get(i) + if (lo..hi).contains(&i[4]) { 0.5 } else { 0.0 });
        let gated = |x: &VoxelTensor| {
            let mut t = Tape::new();
            let v = t.constant(x);
            let g = local_gated(&mut t, v, &params, PREFIX, &spec, &part).unwrap();
            t.to_voxel(g).unwrap()
        };
        let (a, b) = (gated(&x), gated(&bumped));
        let mut inside_changed = false;
        for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
            let z = i % 16;
            if (lo..hi).contains(&z) {
                inside_changed |= p != q;
            } else {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        prop_assert!(inside_changed);
    }
}

/// Calibrated features from one traced pass.
fn calibrated(
    x: &VoxelTensor,
    params: &ModuleParams,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> (VoxelTensor, VoxelTensor) {
    let mut t = Tape::new();
    let v = t.constant(x);
    let tr = vsf_traced(&mut t, v, params, PREFIX, spec, part).unwrap();
    (t.to_voxel(tr.calibrated_global.unwrap()).unwrap(), t.to_voxel(tr.calibrated_local.unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn each_branch_is_scaled_by_the_other_branch_map(delta in 0.05f64..2.0, seed in any::<u64>()) {
        let part = default_partition(16).unwrap();
        let (spec, params) = model(4, 2, VsfMode::Full, AttentionVariant::HeightResolved, &part, seed);
        let x = VoxelTensor::random([1, 4, 3, 3, 16], seed ^ 5);
        let (g0, l0) = calibrated(&x, &params, &spec, &part);
        for (producer, global_moves) in [("map_global", false), ("map_local", true)] {
            let mut p = params.clone();
            for v in &mut p.get_mut(&format!("{PREFIX}.{producer}.bias")).unwrap().values {
                *v += delta;
            }
            let (g1, l1) = calibrated(&x, &p, &spec, &part);
            let (moved, fixed, fixed0, moved0) = if global_moves { (&g1, &l1, &l0, &g0) } else { (&l1, &g1, &g0, &l0) };
            prop_assert_eq!(fixed, fixed0);
            prop_assert!(moved.max_abs_diff(moved0) > 0.0);
        }
    }
}

#[test]
fn identity_merges_give_eighth_of_input() {
    let part = default_partition(16).unwrap();
    let (spec, mut params) = model(4, 2, VsfMode::Full, AttentionVariant::HeightResolved, &part, 0);
    params.zero_values();
    let c = 4;
    for name in ["global.merge", "local.merge"] {
        let w = &mut params.get_mut(&format!("{PREFIX}.{name}.weight")).unwrap().values;
        for ch in 0..c {
            w[(ch * c + ch) * 27 + 13] = 1.0;
        }
    }
    // fuse passes the calibrated global half through unchanged
    let w = &mut params.get_mut(&format!("{PREFIX}.fuse.weight")).unwrap().values;
    for ch in 0..c {
        w[(ch * 2 * c + ch) * 27 + 13] = 1.0;
    }
    let x = VoxelTensor::random([1, 4, 6, 6, 16], 9);
    let out = vsf_forward(&x, &params, PREFIX, &spec, &part).unwrap();
    assert_eq!(out, x.map(|v| v * 0.125));
    assert_eq!(out, reference(&x, &params, &spec, &part));
}

#[test]
fn full_mode_keeps_grid_shape() {
    let part = default_partition(16).unwrap();
    let (spec, params) = model(8, 4, VsfMode::Full, AttentionVariant::HeightResolved, &part, 3);
    let x = VoxelTensor::random([1, 8, 6, 6, 16], 4);
    assert_eq!(vsf_forward(&x, &params, PREFIX, &spec, &part).unwrap().dims(), [1, 8, 6, 6, 16]);
}
