//! Squeeze-and-excitation channel gating for voxel volumes.
//!
//! [`AttentionVariant::HeightResolved`] pools over the X-Y plane only, so each
//! height plane gets its own channel gate. [`AttentionVariant::Global`] is the
//! classic block: pool over the whole volume and broadcast one gate to every
//! height. Both share the same bottleneck MLP (two channel-mixing 1-wide convs,
//! relu then sigmoid), so parameters are interchangeable between variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModuleParams, Param};
use crate::tape::{Tape, Var};
use crate::tensor::{PlaneProfile, VoxelTensor};

pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Per-height gates (pooling over X and Y only).
    #[serde(rename = "seattention3d")]
    HeightResolved,
    /// One gate per channel shared by all heights.
    #[serde(rename = "senet")]
    Global,
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionVariant::HeightResolved => "seattention3d",
            AttentionVariant::Global => "senet",
        })
    }
}

/// Bottleneck weights: `C -> C/r -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    pub reduce_weight: Param,
    pub reduce_bias: Param,
    pub expand_weight: Param,
    pub expand_bias: Param,
    pub reduction: usize,
}

pub fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "channel count {channels} must be divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

impl SeParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(Self {
            reduce_weight: Param::zeros(vec![hidden, channels, 1]),
            reduce_bias: Param::zeros(vec![hidden]),
            expand_weight: Param::zeros(vec![channels, hidden, 1]),
            expand_bias: Param::zeros(vec![channels]),
            reduction,
        })
    }

    pub fn random(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        let mut p = ModuleParams::new(seed);
        init_se(&mut p, "se", channels, reduction)?;
        Self::from_params(&p, "se", reduction)
    }

    pub fn channels(&self) -> usize {
        self.expand_bias.len()
    }

    pub fn insert_into(&self, params: &mut ModuleParams, prefix: &str) -> Result<()> {
        params.insert(&format!("{prefix}.reduce.weight"), self.reduce_weight.clone())?;
        params.insert(&format!("{prefix}.reduce.bias"), self.reduce_bias.clone())?;
        params.insert(&format!("{prefix}.expand.weight"), self.expand_weight.clone())?;
        params.insert(&format!("{prefix}.expand.bias"), self.expand_bias.clone())
    }

    pub fn from_params(params: &ModuleParams, prefix: &str, reduction: usize) -> Result<Self> {
        let get = |s: &str| params.get(&format!("{prefix}.{s}")).cloned();
        let out = Self {
            reduce_weight: get("reduce.weight")?,
            reduce_bias: get("reduce.bias")?,
            expand_weight: get("expand.weight")?,
            expand_bias: get("expand.bias")?,
            reduction,
        };
        let c = out.channels();
        let h = check_reduction(c, reduction)?;
        if out.reduce_weight.shape != [h, c, 1] || out.expand_weight.shape != [c, h, 1] {
            return Err(Error::shape("SeParams", [h, c], &out.reduce_weight.shape));
        }
        Ok(out)
    }

    fn as_module(&self) -> Result<ModuleParams> {
        let mut p = ModuleParams::new(0);
        self.insert_into(&mut p, "se")?;
        Ok(p)
    }
}

/// Adds freshly initialised bottleneck weights under `prefix`.
pub fn init_se(params: &mut ModuleParams, prefix: &str, channels: usize, reduction: usize) -> Result<()> {
    let hidden = check_reduction(channels, reduction)?;
    params.init_conv1d(&format!("{prefix}.reduce"), hidden, channels)?;
    params.init_conv1d(&format!("{prefix}.expand"), channels, hidden)
}

/// `sigmoid(expand(relu(reduce(s))))` on a `[B, C, Z]` profile.
pub fn excite(tape: &mut Tape, s: Var, params: &ModuleParams, prefix: &str) -> Result<Var> {
    let rw = tape.param(params, &format!("{prefix}.reduce.weight"))?;
    let rb = tape.param(params, &format!("{prefix}.reduce.bias"))?;
    let ew = tape.param(params, &format!("{prefix}.expand.weight"))?;
    let eb = tape.param(params, &format!("{prefix}.expand.bias"))?;
    let hidden = tape.conv1d(s, rw, rb)?;
    let hidden = tape.relu(hidden);
    let logits = tape.conv1d(hidden, ew, eb)?;
    Ok(tape.sigmoid(logits))
}

/// Gated output together with the `[B, C, Z]` gate that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Gated {
    pub output: Var,
    pub gate: Var,
}

pub fn gate(tape: &mut Tape, x: Var, params: &ModuleParams, prefix: &str, variant: AttentionVariant) -> Result<Gated> {
    let dims = tape.voxel_dims(x)?;
    let gate = match variant {
        AttentionVariant::HeightResolved => {
            let s = tape.squeeze_xy(x)?;
            excite(tape, s, params, prefix)?
        }
        AttentionVariant::Global => {
            let s = tape.squeeze_xyz(x)?;
            let g = excite(tape, s, params, prefix)?;
            tape.expand_z(g, dims[4])?
        }
    };
    let output = tape.mul_broadcast(x, gate)?;
    Ok(Gated { output, gate })
}

pub fn se_attention3d(tape: &mut Tape, x: Var, params: &ModuleParams, prefix: &str) -> Result<Var> {
    Ok(gate(tape, x, params, prefix, AttentionVariant::HeightResolved)?.output)
}

pub fn senet(tape: &mut Tape, x: Var, params: &ModuleParams, prefix: &str) -> Result<Var> {
    Ok(gate(tape, x, params, prefix, AttentionVariant::Global)?.output)
}

fn eager(x: &VoxelTensor, p: &SeParams, variant: AttentionVariant) -> Result<(VoxelTensor, PlaneProfile)> {
    if p.channels() != x.channels() {
        return Err(Error::shape("channel attention", x.dims(), p.reduce_weight.shape.clone()));
    }
    let module = p.as_module()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = gate(&mut tape, xv, &module, "se", variant)?;
    Ok((tape.to_voxel(g.output)?, tape.to_plane(g.gate)?))
}

/// Height-resolved squeeze-and-excitation on a concrete tensor.
pub fn seattention3d_forward(x: &VoxelTensor, p: &SeParams) -> Result<VoxelTensor> {
    Ok(eager(x, p, AttentionVariant::HeightResolved)?.0)
}

/// Classic squeeze-and-excitation (pooling over X, Y and Z).
pub fn senet_forward(x: &VoxelTensor, p: &SeParams) -> Result<VoxelTensor> {
    Ok(eager(x, p, AttentionVariant::Global)?.0)
}

/// The `[B, C, Z]` gate either variant would apply to `x`.
pub fn gate_profile(x: &VoxelTensor, p: &SeParams, variant: AttentionVariant) -> Result<PlaneProfile> {
    Ok(eager(x, p, variant)?.1)
}

/// Eager excitation of a pooled profile.
pub fn excite_profile(s: &PlaneProfile, p: &SeParams) -> Result<PlaneProfile> {
    let module = p.as_module()?;
    let mut tape = Tape::new();
    let sv = tape.plane_input(s);
    let g = excite(&mut tape, sv, &module, "se")?;
    tape.to_plane(g)
}
