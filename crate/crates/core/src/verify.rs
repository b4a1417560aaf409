//! Registered finite-difference checks, one group per module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionVariant};
use crate::error::{Error, Result};
use crate::gradcheck::{check, CheckOptions, CheckReport};
use crate::losses::{self, Focal, LossConfig, Lovasz, ScalGeo, ScalSem};
use crate::params::{ModuleParams, Param};
use crate::pipeline::{Model, ModelConfig};
use crate::synth::SceneConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{OccupancyGrid, VoxelTensor};
use crate::vsf::{self, HeightPartition, VsfMode, VsfSpec};

pub const MODULES: [&str; 5] = ["ops", "attention", "vsf", "losses", "pipeline"];

pub struct Case {
    pub module: &'static str,
    pub name: &'static str,
    run: fn(&CheckOptions) -> Result<CheckReport>,
}

impl Case {
    pub fn label(&self) -> String {
        format!("{}/{}", self.module, self.name)
    }

    pub fn run(&self, opts: &CheckOptions) -> Result<CheckReport> {
        let mut r = (self.run)(opts)?;
        r.name = self.label();
        Ok(r)
    }
}

fn random_param(shape: Vec<usize>, seed: u64, scale: f64) -> Param {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Param::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn inputs(tensors: &[(&str, Vec<usize>, f64)]) -> ModuleParams {
    let mut p = ModuleParams::new(0);
    for (i, (name, shape, scale)) in tensors.iter().enumerate() {
        p.insert(name, random_param(shape.clone(), 100 + i as u64, *scale)).expect("unique names");
    }
    p
}

/// Scalar `sum(r * sigmoid(v))` with fixed random weights `r` in `[-1, 1]`, so
/// every element gets a distinct sensitivity while the total stays small enough
/// for central differences to resolve.
fn readout(t: &mut Tape, v: Var) -> Result<Var> {
    let s = t.sigmoid(v);
    let [b, c, x, y, z] = t.voxel_dims(s)?;
    let mut total = None;
    for ch in 0..c {
        let slab = t.slice_channels(s, ch, ch + 1)?;
        let r = t.constant(&VoxelTensor::from_fn([b, 1, x, y, z], |i| weight(ch, i)));
        let term = t.mul_map(slab, r)?;
        let term = t.sum(term);
        total = Some(match total {
            Some(acc) => t.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one channel"))
}

fn weight(ch: usize, [b, _, x, y, z]: [usize; 5]) -> f64 {
    let h = [ch, b, x, y, z]
        .iter()
        .fold(0x9e37_79b9_u64, |a, &v| a.rotate_left(17) ^ (v as u64).wrapping_mul(0xff51_afd7_ed55_8ccd));
    (h % 2001) as f64 / 1000.0 - 1.0
}

fn readout_plane(t: &mut Tape, v: Var) -> Var {
    let s = t.sigmoid(v);
    let s = t.sigmoid(s);
    t.sum(s)
}

fn labels(dims: [usize; 4], k: usize, seed: u64) -> OccupancyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    OccupancyGrid::new(dims, (0..n).map(|_| rng.random_range(0..k) as u8).collect()).expect("dims match")
}

fn probs(t: &mut Tape, p: &ModuleParams) -> Result<Var> {
    let logits = t.param_voxel(p, "logits")?;
    t.softmax_channels(logits)
}

const X: [usize; 5] = [1, 3, 3, 2, 4];

fn conv3d(o: &CheckOptions) -> Result<CheckReport> {
    let p = inputs(&[("x", X.to_vec(), 1.0), ("w", vec![2, 3, 3, 3, 3], 0.5), ("b", vec![2], 0.5)]);
    check(
        "",
        &p,
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv3d(x, w, b)?;
            readout(t, y)
        },
        o,
    )
}

fn conv1d(o: &CheckOptions) -> Result<CheckReport> {
    let p = inputs(&[("s", vec![2, 3, 4], 1.0), ("w", vec![2, 3, 1], 0.5), ("b", vec![2], 0.5)]);
    check(
        "",
        &p,
        |t, p| {
            let s = t.param_plane(p, "s")?;
            let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv1d(s, w, b)?;
            Ok(readout_plane(t, y))
        },
        o,
    )
}

fn relu(o: &CheckOptions) -> Result<CheckReport> {
    check(
        "",
        &inputs(&[("x", X.to_vec(), 1.0)]),
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let y = t.relu(x);
            readout(t, y)
        },
        o,
    )
}

fn sigmoid(o: &CheckOptions) -> Result<CheckReport> {
    check(
        "",
        &inputs(&[("x", X.to_vec(), 3.0)]),
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let y = t.sigmoid(x);
            readout(t, y)
        },
        o,
    )
}

fn pooling(o: &CheckOptions) -> Result<CheckReport> {
    check(
        "",
        &inputs(&[("x", X.to_vec(), 1.0)]),
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let a = t.squeeze_xy(x)?;
            let g = t.squeeze_xyz(x)?;
            let g = t.expand_z(g, X[4])?;
            let s = t.add(a, g)?;
            Ok(readout_plane(t, s))
        },
        o,
    )
}

fn broadcasts(o: &CheckOptions) -> Result<CheckReport> {
    let p = inputs(&[("x", X.to_vec(), 1.0), ("gate", vec![1, 3, 4], 1.0), ("map", vec![1, 1, 3, 2, 4], 1.0)]);
    check(
        "",
        &p,
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let g = t.param_plane(p, "gate")?;
            let m = t.param_voxel(p, "map")?;
            let y = t.mul_broadcast(x, g)?;
            let y = t.mul_map(y, m)?;
            readout(t, y)
        },
        o,
    )
}

fn channels(o: &CheckOptions) -> Result<CheckReport> {
    let p = inputs(&[("a", X.to_vec(), 1.0), ("b", vec![1, 2, 3, 2, 4], 1.0)]);
    check(
        "",
        &p,
        |t, p| {
            let a = t.param_voxel(p, "a")?;
            let b = t.param_voxel(p, "b")?;
            let c = t.concat_channels(a, b)?;
            let s = t.slice_channels(c, 1, 4)?;
            let y = t.softmax_channels(s)?;
            readout(t, y)
        },
        o,
    )
}

fn height_slices(o: &CheckOptions) -> Result<CheckReport> {
    check(
        "",
        &inputs(&[("x", X.to_vec(), 1.0)]),
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let lo = t.slice_z(x, 0, 1)?;
            let hi = t.slice_z(x, 1, 4)?;
            let lo = t.sigmoid(lo);
            let hi = t.scale(hi, -2.0);
            let y = t.assemble_z(&[(hi, 1, 4), (lo, 0, 1)], 4)?;
            let m = t.mean(y);
            let r = readout(t, y)?;
            t.add(r, m)
        },
        o,
    )
}

fn se_params(c: usize, r: usize) -> ModuleParams {
    let mut p = inputs(&[("x", vec![2, c, 2, 2, 5], 1.0)]);
    attention::init_se(&mut p, "se", c, r).expect("valid reduction");
    p
}

fn gate_case(variant: AttentionVariant, o: &CheckOptions) -> Result<CheckReport> {
    check(
        "",
        &se_params(4, 2),
        |t, p| {
            let x = t.param_voxel(p, "x")?;
            let g = attention::gate(t, x, p, "se", variant)?;
            readout(t, g.output)
        },
        o,
    )
}

fn seattention3d(o: &CheckOptions) -> Result<CheckReport> {
    gate_case(AttentionVariant::HeightResolved, o)
}

fn senet(o: &CheckOptions) -> Result<CheckReport> {
    gate_case(AttentionVariant::Global, o)
}

fn vsf_case(mode: VsfMode, attention: AttentionVariant, o: &CheckOptions) -> Result<CheckReport> {
    let spec = VsfSpec { attention, ..VsfSpec::new(4, mode) };
    let part = vsf::default_partition(16)?;
    let mut p = inputs(&[("x", vec![1, 4, 3, 3, 16], 1.0)]);
    vsf::init_vsf(&mut p, "v", &spec, part.len())?;
    let opts = CheckOptions { max_coords_per_tensor: o.max_coords_per_tensor.or(Some(48)), ..o.clone() };
    check("", &p, |t, p| vsf_readout(t, p, &spec, &part), &opts)
}

fn vsf_readout(t: &mut Tape, p: &ModuleParams, spec: &VsfSpec, part: &HeightPartition) -> Result<Var> {
    let x = t.param_voxel(p, "x")?;
    let y = vsf::vsf(t, x, p, "v", spec, part)?;
    readout(t, y)
}

fn vsf_full(o: &CheckOptions) -> Result<CheckReport> {
    vsf_case(VsfMode::Full, AttentionVariant::HeightResolved, o)
}

fn vsf_global_only(o: &CheckOptions) -> Result<CheckReport> {
    vsf_case(VsfMode::GlobalOnly, AttentionVariant::HeightResolved, o)
}

fn vsf_local_only(o: &CheckOptions) -> Result<CheckReport> {
    vsf_case(VsfMode::LocalOnly, AttentionVariant::HeightResolved, o)
}

fn vsf_concat_fusion(o: &CheckOptions) -> Result<CheckReport> {
    vsf_case(VsfMode::ConcatFusion, AttentionVariant::HeightResolved, o)
}

fn vsf_senet(o: &CheckOptions) -> Result<CheckReport> {
    vsf_case(VsfMode::Full, AttentionVariant::Global, o)
}

const K: usize = 17;

fn loss_inputs() -> (ModuleParams, OccupancyGrid) {
    (inputs(&[("logits", vec![1, K, 3, 3, 4], 2.0)]), labels([1, 3, 3, 4], K, 7))
}

fn focal(o: &CheckOptions) -> Result<CheckReport> {
    let (p, y) = loss_inputs();
    let alpha: Vec<f64> = (0..K).map(|c| 0.5 + c as f64 / K as f64).collect();
    check(
        "",
        &p,
        |t, p| {
            let q = probs(t, p)?;
            t.objective(q, &Focal { labels: &y, gamma: 2.0, alpha: &alpha })
        },
        o,
    )
}

fn lovasz(o: &CheckOptions) -> Result<CheckReport> {
    let (p, y) = loss_inputs();
    check(
        "",
        &p,
        |t, p| {
            let q = probs(t, p)?;
            t.objective(q, &Lovasz { labels: &y })
        },
        o,
    )
}

fn scal_geo(o: &CheckOptions) -> Result<CheckReport> {
    let (p, y) = loss_inputs();
    check(
        "",
        &p,
        |t, p| {
            let q = probs(t, p)?;
            t.objective(q, &ScalGeo { labels: &y })
        },
        o,
    )
}

fn scal_sem(o: &CheckOptions) -> Result<CheckReport> {
    let (p, y) = loss_inputs();
    check(
        "",
        &p,
        |t, p| {
            let q = probs(t, p)?;
            t.objective(q, &ScalSem { labels: &y })
        },
        o,
    )
}

fn total_loss(o: &CheckOptions) -> Result<CheckReport> {
    let (p, y) = loss_inputs();
    let cfg = LossConfig::default();
    let alpha = losses::class_weights(&[&y], K, cfg.class_weighting)?;
    check(
        "",
        &p,
        |t, p| {
            let q = probs(t, p)?;
            Ok(losses::total_loss_on_tape(t, q, &y, &cfg, &alpha)?.0)
        },
        o,
    )
}

/// `total_loss(forward(cam, lidar))` of a four-channel model on a 4x4x16 grid.
fn end_to_end(o: &CheckOptions) -> Result<CheckReport> {
    let scene = SceneConfig { cam_channels: 3, lidar_channels: 3, ..SceneConfig::scaled_to(4, 4) };
    let model_cfg = ModelConfig { channels: 4, reduction: 2, ..ModelConfig::default() };
    let model = Model::new(&model_cfg, &scene, 11)?;
    let k = model.num_classes;
    let y = labels([1, 4, 4, 16], k, 13);
    let cfg = LossConfig::default();
    let alpha = losses::class_weights(&[&y], k, cfg.class_weighting)?;
    let mut p = model.params.clone();
    p.insert("input.cam", random_param(vec![1, 3, 4, 4, 16], 21, 1.0))?;
    p.insert("input.lidar", random_param(vec![1, 3, 4, 4, 16], 22, 1.0))?;
    let opts = CheckOptions { max_coords_per_tensor: o.max_coords_per_tensor.or(Some(24)), ..o.clone() };
    check(
        "",
        &p,
        |t, p| {
            let m = Model { params: p.clone(), ..model.clone() };
            let cam = t.param_voxel(p, "input.cam")?;
            let lidar = t.param_voxel(p, "input.lidar")?;
            let q = m.forward(t, cam, lidar)?;
            Ok(losses::total_loss_on_tape(t, q, &y, &cfg, &alpha)?.0)
        },
        &opts,
    )
}

pub fn cases() -> Vec<Case> {
    let case = |module, name, run| Case { module, name, run };
    vec![
        case("ops", "conv3d", conv3d as fn(&CheckOptions) -> Result<CheckReport>),
        case("ops", "conv1d", conv1d),
        case("ops", "relu", relu),
        case("ops", "sigmoid", sigmoid),
        case("ops", "pooling", pooling),
        case("ops", "broadcast_products", broadcasts),
        case("ops", "channel_concat_slice_softmax", channels),
        case("ops", "height_slice_assemble", height_slices),
        case("attention", "seattention3d", seattention3d),
        case("attention", "senet", senet),
        case("vsf", "full", vsf_full),
        case("vsf", "global_only", vsf_global_only),
        case("vsf", "local_only", vsf_local_only),
        case("vsf", "concat_fusion", vsf_concat_fusion),
        case("vsf", "full_senet", vsf_senet),
        case("losses", "focal", focal),
        case("losses", "lovasz", lovasz),
        case("losses", "scal_geo", scal_geo),
        case("losses", "scal_sem", scal_sem),
        case("losses", "total", total_loss),
        case("pipeline", "end_to_end", end_to_end),
    ]
}

/// Runs every case, or only those of `module`.
pub fn run(module: Option<&str>, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module '{m}' (expected one of {})", MODULES.join(", "))));
        }
    }
    cases().iter().filter(|c| module.is_none_or(|m| c.module == m)).map(|c| c.run(opts)).collect()
}
