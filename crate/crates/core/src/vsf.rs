//! Height-sliced feature fusion.
//!
//! A volume is cut into horizontal slabs along z. Each slab is gated by its own
//! channel attention block and the slabs are reassembled into a local feature;
//! the whole volume gated in one piece gives the global feature. Each branch
//! then produces a one-channel map that reweights the *other* branch before
//! the two are fused.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionVariant};
use crate::error::{Error, Result};
use crate::params::ModuleParams;
use crate::tape::{Tape, Var};
use crate::tensor::VoxelTensor;

pub const Z_MIN_M: f64 = -5.0;
pub const Z_MAX_M: f64 = 3.0;
pub const DEFAULT_INTERVALS_M: [(f64, f64); 6] =
    [(-5.0, -3.0), (-3.0, -2.0), (-2.0, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 3.0)];
pub const MERGE_KERNEL: usize = 3;

const ALIGN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightPartition {
    z_min_m: f64,
    z_max_m: f64,
    local_intervals: Vec<(f64, f64)>,
    voxel_ranges: Vec<(usize, usize)>,
    z: usize,
}

fn voxel_index(m: f64, z_min: f64, voxel: f64, what: &str) -> Result<usize> {
    let f = (m - z_min) / voxel;
    let r = f.round();
    if (f - r).abs() > ALIGN_EPS || r < 0.0 {
        return Err(Error::Config(format!(
            "{what} {m} m does not fall on a voxel boundary ({voxel} m voxels from {z_min} m)"
        )));
    }
    Ok(r as usize)
}

impl HeightPartition {
    /// Validates meter intervals against a grid of `z` voxels spanning `[z_min, z_max]`.
    pub fn from_intervals(z_min_m: f64, z_max_m: f64, intervals: &[(f64, f64)], z: usize) -> Result<Self> {
        if z == 0 || !(z_max_m > z_min_m) {
            return Err(Error::Config(format!("empty height range [{z_min_m}, {z_max_m}] m with Z={z}")));
        }
        if intervals.is_empty() {
            return Err(Error::Config("height partition needs at least one interval".into()));
        }
        let voxel = (z_max_m - z_min_m) / z as f64;
        let mut expect = z_min_m;
        let mut ranges = Vec::with_capacity(intervals.len());
        for &(lo, hi) in intervals {
            if !(hi > lo) {
                return Err(Error::Config(format!("interval [{lo}, {hi}] m is empty or reversed")));
            }
            if (lo - expect).abs() > ALIGN_EPS * voxel {
                let kind = if lo < expect { "overlaps the previous interval" } else { "leaves a gap" };
                return Err(Error::Config(format!("interval [{lo}, {hi}] m {kind} (expected start {expect} m)")));
            }
            let a = voxel_index(lo, z_min_m, voxel, &format!("interval [{lo}, {hi}] start"))?;
            let b = voxel_index(hi, z_min_m, voxel, &format!("interval [{lo}, {hi}] end"))?;
            if b > z {
                return Err(Error::Config(format!("interval [{lo}, {hi}] m extends past {z_max_m} m")));
            }
            ranges.push((a, b));
            expect = hi;
        }
        if (expect - z_max_m).abs() > ALIGN_EPS * voxel {
            return Err(Error::Config(format!("intervals end at {expect} m but the height range ends at {z_max_m} m")));
        }
        Ok(Self { z_min_m, z_max_m, local_intervals: intervals.to_vec(), voxel_ranges: ranges, z })
    }

    /// Builds a partition from slab widths in voxels, bottom to top.
    pub fn from_widths(z_min_m: f64, z_max_m: f64, widths: &[usize]) -> Result<Self> {
        let z: usize = widths.iter().sum();
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero-width slab in {widths:?}")));
        }
        let voxel = (z_max_m - z_min_m) / z.max(1) as f64;
        let mut lo = 0;
        let intervals: Vec<(f64, f64)> = widths
            .iter()
            .map(|&w| {
                let iv = (z_min_m + lo as f64 * voxel, z_min_m + (lo + w) as f64 * voxel);
                lo += w;
                iv
            })
            .collect();
        Self::from_intervals(z_min_m, z_max_m, &intervals, z)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.voxel_ranges
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.local_intervals
    }

    pub fn widths(&self) -> Vec<usize> {
        self.voxel_ranges.iter().map(|(a, b)| b - a).collect()
    }

    pub fn len(&self) -> usize {
        self.voxel_ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_ranges.is_empty()
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn voxel_size_m(&self) -> f64 {
        (self.z_max_m - self.z_min_m) / self.z as f64
    }

    pub fn bounds_m(&self) -> (f64, f64) {
        (self.z_min_m, self.z_max_m)
    }
}

/// The six-slab split of `[-5, 3]` m.
pub fn default_partition(z: usize) -> Result<HeightPartition> {
    HeightPartition::from_intervals(Z_MIN_M, Z_MAX_M, &DEFAULT_INTERVALS_M, z)
}

/// `n` equal slabs over `[-5, 3]` m.
pub fn uniform_partition(z: usize, n: usize) -> Result<HeightPartition> {
    if n == 0 || !z.is_multiple_of(n) {
        return Err(Error::Config(format!("Z={z} is not divisible into {n} equal slabs")));
    }
    HeightPartition::from_widths(Z_MIN_M, Z_MAX_M, &vec![z / n; n])
}

/// How a partition is chosen in configuration files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionSpec {
    #[default]
    Default,
    Uniform { slices: usize },
    Intervals { intervals: Vec<(f64, f64)> },
}

impl PartitionSpec {
    pub fn build(&self, z: usize) -> Result<HeightPartition> {
        match self {
            PartitionSpec::Default => default_partition(z),
            PartitionSpec::Uniform { slices } => uniform_partition(z, *slices),
            PartitionSpec::Intervals { intervals } => HeightPartition::from_intervals(Z_MIN_M, Z_MAX_M, intervals, z),
        }
    }
}

pub fn slice_z(x: &VoxelTensor, range: (usize, usize)) -> Result<VoxelTensor> {
    let mut t = Tape::new();
    let v = t.constant(x);
    let s = t.slice_z(v, range.0, range.1)?;
    t.to_voxel(s)
}

/// Inverse of slicing every range of `part`.
pub fn unslice_z(slices: &[VoxelTensor], part: &HeightPartition) -> Result<VoxelTensor> {
    if slices.len() != part.len() {
        return Err(Error::shape("unslice_z", slices.len(), part.len()));
    }
    let mut t = Tape::new();
    let parts: Vec<(Var, usize, usize)> =
        slices.iter().zip(part.ranges()).map(|(s, &(lo, hi))| (t.constant(s), lo, hi)).collect();
    let v = t.assemble_z(&parts, part.z())?;
    t.to_voxel(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsfMode {
    Full,
    GlobalOnly,
    LocalOnly,
    ConcatFusion,
    None,
}

impl VsfMode {
    pub const ALL: [VsfMode; 5] =
        [VsfMode::None, VsfMode::LocalOnly, VsfMode::GlobalOnly, VsfMode::ConcatFusion, VsfMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            VsfMode::Full => "full",
            VsfMode::GlobalOnly => "global_only",
            VsfMode::LocalOnly => "local_only",
            VsfMode::ConcatFusion => "concat_fusion",
            VsfMode::None => "none",
        }
    }

    fn uses_global(self) -> bool {
        matches!(self, VsfMode::Full | VsfMode::GlobalOnly | VsfMode::ConcatFusion)
    }

    fn uses_local(self) -> bool {
        matches!(self, VsfMode::Full | VsfMode::LocalOnly | VsfMode::ConcatFusion)
    }
}

impl std::fmt::Display for VsfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VsfSpec {
    pub channels: usize,
    pub reduction: usize,
    pub attention: AttentionVariant,
    pub mode: VsfMode,
}

impl VsfSpec {
    pub fn new(channels: usize, mode: VsfMode) -> Self {
        Self { channels, reduction: attention::DEFAULT_REDUCTION, attention: AttentionVariant::HeightResolved, mode }
    }
}

fn name(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}

/// Adds every weight `spec.mode` needs for a partition of `slices` slabs.
pub fn init_vsf(params: &mut ModuleParams, prefix: &str, spec: &VsfSpec, slices: usize) -> Result<()> {
    let c = spec.channels;
    attention::check_reduction(c, spec.reduction)?;
    if spec.mode == VsfMode::None {
        return Ok(());
    }
    if spec.mode.uses_global() {
        attention::init_se(params, &name(prefix, "global.se"), c, spec.reduction)?;
        params.init_conv3d(&name(prefix, "global.merge"), c, c, MERGE_KERNEL)?;
    }
    if spec.mode.uses_local() {
        for i in 0..slices {
            attention::init_se(params, &name(prefix, &format!("local.{i}.se")), c, spec.reduction)?;
        }
        params.init_conv3d(&name(prefix, "local.merge"), c, c, MERGE_KERNEL)?;
    }
    if spec.mode == VsfMode::Full {
        params.init_conv3d(&name(prefix, "map_global"), 1, c, 1)?;
        params.init_conv3d(&name(prefix, "map_local"), 1, c, 1)?;
    }
    if matches!(spec.mode, VsfMode::Full | VsfMode::ConcatFusion) {
        params.init_conv3d(&name(prefix, "fuse"), c, 2 * c, MERGE_KERNEL)?;
    }
    attention::init_se(params, &name(prefix, "fuse.se"), c, spec.reduction)
}

fn conv(tape: &mut Tape, x: Var, params: &ModuleParams, prefix: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    tape.conv3d(x, w, b)
}

fn check_depth(tape: &Tape, x: Var, part: &HeightPartition) -> Result<()> {
    let d = tape.voxel_dims(x)?;
    if d[4] != part.z() {
        return Err(Error::shape("height partition", d, part.z()));
    }
    Ok(())
}

/// Per-slab gated features reassembled along z, before the merge conv.
pub fn local_gated(
    tape: &mut Tape,
    x: Var,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> Result<Var> {
    check_depth(tape, x, part)?;
    let mut slabs = Vec::with_capacity(part.len());
    for (i, &(lo, hi)) in part.ranges().iter().enumerate() {
        let s = tape.slice_z(x, lo, hi)?;
        let g = attention::gate(tape, s, params, &name(prefix, &format!("local.{i}.se")), spec.attention)?;
        slabs.push((g.output, lo, hi));
    }
    tape.assemble_z(&slabs, part.z())
}

pub fn build_local_feature(
    tape: &mut Tape,
    x: Var,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> Result<Var> {
    let g = local_gated(tape, x, params, prefix, spec, part)?;
    conv(tape, g, params, &name(prefix, "local.merge"))
}

pub fn build_global_feature(
    tape: &mut Tape,
    x: Var,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
) -> Result<Var> {
    let g = attention::gate(tape, x, params, &name(prefix, "global.se"), spec.attention)?;
    conv(tape, g.output, params, &name(prefix, "global.merge"))
}

/// One-channel squashed map from a `C -> 1` pointwise conv.
pub fn attention_map(tape: &mut Tape, f: Var, params: &ModuleParams, conv_prefix: &str) -> Result<Var> {
    let logits = conv(tape, f, params, conv_prefix)?;
    Ok(tape.sigmoid(logits))
}

/// Reweights each branch by the other branch's map.
pub fn cross_calibrate(tape: &mut Tape, fg: Var, fl: Var, ag: Var, al: Var) -> Result<(Var, Var)> {
    let g = tape.mul_map(fg, al)?;
    let l = tape.mul_map(fl, ag)?;
    Ok((g, l))
}

/// Intermediate values of one forward pass; absent stages are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct VsfTrace {
    pub global: Option<Var>,
    pub local: Option<Var>,
    pub map_global: Option<Var>,
    pub map_local: Option<Var>,
    pub calibrated_global: Option<Var>,
    pub calibrated_local: Option<Var>,
    pub output: Option<Var>,
}

pub fn vsf_traced(
    tape: &mut Tape,
    x: Var,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> Result<VsfTrace> {
    check_depth(tape, x, part)?;
    let d = tape.voxel_dims(x)?;
    if d[1] != spec.channels {
        return Err(Error::shape("vsf channels", d, spec.channels));
    }
    let mut tr = VsfTrace::default();
    if spec.mode == VsfMode::None {
        tr.output = Some(x);
        return Ok(tr);
    }
    if spec.mode.uses_global() {
        tr.global = Some(build_global_feature(tape, x, params, prefix, spec)?);
    }
    if spec.mode.uses_local() {
        tr.local = Some(build_local_feature(tape, x, params, prefix, spec, part)?);
    }
    let fused = match (spec.mode, tr.global, tr.local) {
        (VsfMode::GlobalOnly, Some(g), _) => g,
        (VsfMode::LocalOnly, _, Some(l)) => l,
        (VsfMode::ConcatFusion, Some(g), Some(l)) => {
            let cat = tape.concat_channels(g, l)?;
            conv(tape, cat, params, &name(prefix, "fuse"))?
        }
        (VsfMode::Full, Some(g), Some(l)) => {
            let ag = attention_map(tape, g, params, &name(prefix, "map_global"))?;
            let al = attention_map(tape, l, params, &name(prefix, "map_local"))?;
            let (cg, cl) = cross_calibrate(tape, g, l, ag, al)?;
            tr.map_global = Some(ag);
            tr.map_local = Some(al);
            tr.calibrated_global = Some(cg);
            tr.calibrated_local = Some(cl);
            let cat = tape.concat_channels(cg, cl)?;
            conv(tape, cat, params, &name(prefix, "fuse"))?
        }
        _ => unreachable!("branch selection covers every mode"),
    };
    let out = attention::gate(tape, fused, params, &name(prefix, "fuse.se"), spec.attention)?;
    tr.output = Some(out.output);
    Ok(tr)
}

pub fn vsf(
    tape: &mut Tape,
    x: Var,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> Result<Var> {
    Ok(vsf_traced(tape, x, params, prefix, spec, part)?.output.expect("output is always set"))
}

/// Eager forward pass on a concrete tensor.
pub fn vsf_forward(
    x: &VoxelTensor,
    params: &ModuleParams,
    prefix: &str,
    spec: &VsfSpec,
    part: &HeightPartition,
) -> Result<VoxelTensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = vsf(&mut tape, v, params, prefix, spec, part)?;
    tape.to_voxel(out)
}
