//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in evaluation
//! order. Nodes only reference earlier nodes, so the backward sweep is a single
//! reverse walk. Only the closed op vocabulary below is supported; scalar loss
//! terms plug in through [`Objective`], which supplies its own gradient.
//!
//! Non-smooth ops (relu, sorting inside objectives, log clamps) fold the piece
//! of the domain they evaluated on into [`Tape::signature`]. Finite-difference
//! checks use it to discard probes that cross a kink.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Conv3dShape, Pointwise};
use crate::params::{splitmix64, ModuleParams};
use crate::tensor::{numel, Dims5, PlaneProfile, VoxelTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Voxel(Dims5),
    Plane([usize; 3]),
    Flat(Vec<usize>),
    Scalar,
}

impl Shape {
    pub fn numel(&self) -> usize {
        match self {
            Shape::Voxel(d) => numel(d),
            Shape::Plane(d) => numel(d),
            Shape::Flat(d) => numel(d),
            Shape::Scalar => 1,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            Shape::Voxel(d) => d.to_vec(),
            Shape::Plane(d) => d.to_vec(),
            Shape::Flat(d) => d.clone(),
            Shape::Scalar => vec![],
        }
    }
}

/// Result of evaluating a scalar objective on one voxel tensor.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Identifies the smooth piece the input fell in (0 when smooth everywhere).
    pub signature: u64,
}

/// A scalar-valued function of one `[B, C, X, Y, Z]` input with an analytic gradient.
pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, dims: Dims5, input: &[f64]) -> Result<Evaluation>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, shape: Conv3dShape },
    Conv1d { s: Var, w: Var, b: Var, input: [usize; 3], c_out: usize },
    Relu(Var),
    Sigmoid(Var),
    SqueezeXy(Var),
    SqueezeXyz(Var),
    ExpandZ(Var),
    MulBroadcast { x: Var, gate: Var },
    MulMap { x: Var, map: Var },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, lo: usize, hi: usize },
    SliceZ { x: Var, lo: usize, hi: usize },
    AssembleZ { parts: Vec<(Var, usize, usize)> },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Objective { input: Var, grad: Arc<Vec<f64>> },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
    signature: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn fold_signature(&mut self, piece: u64) {
        self.signature = splitmix64(self.signature ^ piece);
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.node(v).shape {
            Shape::Scalar => Ok(self.node(v).value[0]),
            ref s => Err(Error::shape("scalar", "scalar", s)),
        }
    }

    pub fn voxel_dims(&self, v: Var) -> Result<Dims5> {
        match self.node(v).shape {
            Shape::Voxel(d) => Ok(d),
            ref s => Err(Error::shape("voxel operand", "[B, C, X, Y, Z]", s)),
        }
    }

    pub fn plane_dims(&self, v: Var) -> Result<[usize; 3]> {
        match self.node(v).shape {
            Shape::Plane(d) => Ok(d),
            ref s => Err(Error::shape("plane operand", "[B, C, Z]", s)),
        }
    }

    fn flat_dims(&self, v: Var) -> Vec<usize> {
        self.node(v).shape.dims()
    }

    pub fn to_voxel(&self, v: Var) -> Result<VoxelTensor> {
        VoxelTensor::new(self.voxel_dims(v)?, self.value(v).to_vec())
    }

    pub fn to_plane(&self, v: Var) -> Result<PlaneProfile> {
        PlaneProfile::new(self.plane_dims(v)?, self.value(v).to_vec())
    }

    // -- leaves --------------------------------------------------------------

    /// Differentiable voxel leaf.
    pub fn input(&mut self, t: &VoxelTensor) -> Var {
        self.push(Shape::Voxel(t.dims()), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable voxel leaf (data that never needs a gradient).
    pub fn constant(&mut self, t: &VoxelTensor) -> Var {
        self.push(Shape::Voxel(t.dims()), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn plane_input(&mut self, p: &PlaneProfile) -> Var {
        self.push(Shape::Plane(p.dims()), p.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a named parameter; repeated requests return the same node.
    pub fn param(&mut self, params: &ModuleParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = params.get(name)?;
        let v = self.push(Shape::Flat(p.shape.clone()), p.values.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers a rank-5 named tensor as a differentiable voxel leaf.
    pub fn param_voxel(&mut self, params: &ModuleParams, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        let dims: Dims5 = p.shape.as_slice().try_into().map_err(|_| Error::shape("param_voxel", name, &p.shape))?;
        self.param_shaped(params, name, Shape::Voxel(dims))
    }

    /// Registers a rank-3 named tensor as a differentiable plane leaf.
    pub fn param_plane(&mut self, params: &ModuleParams, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        let dims: [usize; 3] =
            p.shape.as_slice().try_into().map_err(|_| Error::shape("param_plane", name, &p.shape))?;
        self.param_shaped(params, name, Shape::Plane(dims))
    }

    fn param_shaped(&mut self, params: &ModuleParams, name: &str, shape: Shape) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            if *self.shape(v) != shape {
                return Err(Error::shape("param", self.shape(v), shape));
            }
            return Ok(v);
        }
        let v = self.push(shape, params.get(name)?.values.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // -- ops -----------------------------------------------------------------

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = Conv3dShape::check(self.voxel_dims(x)?, &self.flat_dims(w), &self.flat_dims(b))?;
        let out = ops::conv3d_forward(shape, self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Shape::Voxel(shape.output()), out, Op::Conv3d { x, w, b, shape }, rg))
    }

    pub fn conv1d(&mut self, s: Var, w: Var, b: Var) -> Result<Var> {
        let input = self.plane_dims(s)?;
        let out_dims = ops::conv1d_shape(input, &self.flat_dims(w), &self.flat_dims(b))?;
        let out = ops::conv1d_forward(input, out_dims[1], self.value(s), self.value(w), self.value(b));
        let rg = self.rg(&[s, w, b]);
        Ok(self.push(Shape::Plane(out_dims), out, Op::Conv1d { s, w, b, input, c_out: out_dims[1] }, rg))
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Var {
        match f {
            Pointwise::Relu => self.relu(x),
            Pointwise::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let out: Vec<f64> = n.value.iter().map(|&v| ops::relu(v)).collect();
        let mut mask = 0xa5a5_u64;
        for (i, &v) in n.value.iter().enumerate() {
            if v > 0.0 {
                mask = splitmix64(mask ^ i as u64);
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.fold_signature(mask);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|&v| ops::sigmoid(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    pub fn squeeze_xy(&mut self, x: Var) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        let out = ops::squeeze_xy_forward(d, self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::Plane([d[0], d[1], d[4]]), out, Op::SqueezeXy(x), rg))
    }

    pub fn squeeze_xyz(&mut self, x: Var) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        let out = ops::squeeze_xyz_forward(d, self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::Plane([d[0], d[1], 1]), out, Op::SqueezeXyz(x), rg))
    }

    /// Repeats a `[B, C, 1]` profile along height.
    pub fn expand_z(&mut self, p: Var, z: usize) -> Result<Var> {
        let d = self.plane_dims(p)?;
        if d[2] != 1 {
            return Err(Error::shape("expand_z", d, "[B, C, 1]"));
        }
        let out = self.value(p).iter().flat_map(|&v| std::iter::repeat_n(v, z)).collect();
        let rg = self.rg(&[p]);
        Ok(self.push(Shape::Plane([d[0], d[1], z]), out, Op::ExpandZ(p), rg))
    }

    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        let g = self.plane_dims(gate)?;
        if g != [d[0], d[1], d[4]] {
            return Err(Error::shape("mul_broadcast", d, g));
        }
        let out = ops::mul_broadcast_forward(d, self.value(x), self.value(gate));
        let rg = self.rg(&[x, gate]);
        Ok(self.push(Shape::Voxel(d), out, Op::MulBroadcast { x, gate }, rg))
    }

    /// Weights every channel of `x` by a single-channel map.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        let m = self.voxel_dims(map)?;
        if m[1] != 1 || m[0] != d[0] || m[2..] != d[2..] {
            return Err(Error::shape("mul_map", d, m));
        }
        let out = ops::mul_map_forward(d, self.value(x), self.value(map));
        let rg = self.rg(&[x, map]);
        Ok(self.push(Shape::Voxel(d), out, Op::MulMap { x, map }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.voxel_dims(a)?, self.voxel_dims(b)?);
        if da[0] != db[0] || da[2..] != db[2..] {
            return Err(Error::shape("concat_channels", da, db));
        }
        let out = ops::concat_channels_forward(da, self.value(a), db, self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Shape::Voxel([da[0], da[1] + db[1], da[2], da[3], da[4]]), out, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        if lo >= hi || hi > d[1] {
            return Err(Error::shape("slice_channels", d, (lo, hi)));
        }
        let out = ops::slice_channels_forward(d, self.value(x), lo, hi);
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::Voxel([d[0], hi - lo, d[2], d[3], d[4]]), out, Op::SliceChannels { x, lo, hi }, rg))
    }

    pub fn slice_z(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        if lo >= hi || hi > d[4] {
            return Err(Error::shape("slice_z", d, (lo, hi)));
        }
        let out = ops::slice_z_forward(d, self.value(x), lo, hi);
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::Voxel([d[0], d[1], d[2], d[3], hi - lo]), out, Op::SliceZ { x, lo, hi }, rg))
    }

    /// Places height slabs back at their ranges in a volume of height `z`.
    /// The ranges must tile `[0, z)` exactly.
    pub fn assemble_z(&mut self, parts: &[(Var, usize, usize)], z: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Validation("assemble_z needs at least one slab".into()))?;
        let d0 = self.voxel_dims(first.0)?;
        let mut covered = vec![false; z];
        for &(v, lo, hi) in parts {
            let d = self.voxel_dims(v)?;
            if d[..4] != d0[..4] || hi <= lo || hi > z || d[4] != hi - lo {
                return Err(Error::shape("assemble_z", d0, (d, lo, hi)));
            }
            for c in &mut covered[lo..hi] {
                if *c {
                    return Err(Error::Validation(format!("assemble_z: slab [{lo}, {hi}) overlaps another")));
                }
                *c = true;
            }
        }
        if let Some(gap) = covered.iter().position(|c| !c) {
            return Err(Error::Validation(format!("assemble_z: height {gap} not covered")));
        }
        let dims = [d0[0], d0[1], d0[2], d0[3], z];
        let mut out = vec![0.0; numel(&dims)];
        for &(v, lo, hi) in parts {
            ops::place_z(&mut out, z, self.value(v), lo, hi);
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Shape::Voxel(dims), out, Op::AssembleZ { parts: parts.to_vec() }, rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let d = self.voxel_dims(x)?;
        let out = ops::softmax_channels_forward(d, self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::Voxel(d), out, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Shape::Scalar, vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Shape::Scalar, vec![m], Op::Mean(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Scale(x, factor), rg)
    }

    pub fn objective(&mut self, input: Var, obj: &dyn Objective) -> Result<Var> {
        let d = self.voxel_dims(input)?;
        let eval = obj.evaluate(d, self.value(input))?;
        if eval.grad.len() != numel(&d) {
            return Err(Error::shape(obj.name(), d, eval.grad.len()));
        }
        if eval.signature != 0 {
            self.fold_signature(eval.signature);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Shape::Scalar, vec![eval.value], Op::Objective { input, grad: Arc::new(eval.grad) }, rg))
    }

    // -- backward ------------------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; call reset_grads first".into()));
        }
        if self.node(loss).shape != Shape::Scalar {
            return Err(Error::shape("backward", "scalar", self.shape(loss)));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, upd: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&upd).for_each(|(e, u)| *e += u),
                slot => *slot = Some(upd),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, shape } => {
                let gr = ops::conv3d_backward(*shape, val(*x), val(*w), g, needs(*x));
                if let Some(gx) = gr.input {
                    acc(*x, gx);
                }
                acc(*w, gr.weight);
                acc(*b, gr.bias);
            }
            Op::Conv1d { s, w, b, input, c_out } => {
                let (gs, gw, gb) = ops::conv1d_backward(*input, *c_out, val(*s), val(*w), g);
                acc(*s, gs);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Relu(x) => {
                let gx = val(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node.value.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                acc(*x, gx);
            }
            Op::SqueezeXy(x) => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                acc(*x, ops::squeeze_xy_backward(d, g));
            }
            Op::SqueezeXyz(x) => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                acc(*x, ops::squeeze_xyz_backward(d, g));
            }
            Op::ExpandZ(p) => {
                let z = match node.shape {
                    Shape::Plane(d) => d[2],
                    _ => unreachable!("expand_z output is a plane"),
                };
                acc(*p, g.chunks_exact(z).map(|c| c.iter().sum()).collect());
            }
            Op::MulBroadcast { x, gate } => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                let (gx, gg) = ops::mul_broadcast_backward(d, val(*x), val(*gate), g);
                acc(*x, gx);
                acc(*gate, gg);
            }
            Op::MulMap { x, map } => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                let (gx, gm) = ops::mul_map_backward(d, val(*x), val(*map), g);
                acc(*x, gx);
                acc(*map, gm);
            }
            Op::Concat { a, b } => {
                let da = self.voxel_dims(*a).expect("recorded voxel");
                let dout = self.voxel_dims(Var(i)).expect("recorded voxel");
                acc(*a, ops::slice_channels_forward(dout, g, 0, da[1]));
                acc(*b, ops::slice_channels_forward(dout, g, da[1], dout[1]));
            }
            Op::SliceChannels { x, lo, hi } => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                let vol = numel(&d[2..]);
                let w = hi - lo;
                let mut gx = vec![0.0; numel(&d)];
                for bi in 0..d[0] {
                    gx[(bi * d[1] + lo) * vol..(bi * d[1] + hi) * vol]
                        .copy_from_slice(&g[bi * w * vol..(bi + 1) * w * vol]);
                }
                acc(*x, gx);
            }
            Op::SliceZ { x, lo, hi } => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                let mut gx = vec![0.0; numel(&d)];
                ops::place_z(&mut gx, d[4], g, *lo, *hi);
                acc(*x, gx);
            }
            Op::AssembleZ { parts } => {
                let d = self.voxel_dims(Var(i)).expect("recorded voxel");
                for &(v, lo, hi) in parts {
                    acc(v, ops::slice_z_forward(d, g, lo, hi));
                }
            }
            Op::Softmax(x) => {
                let d = self.voxel_dims(*x).expect("recorded voxel");
                acc(*x, ops::softmax_channels_backward(d, &node.value, g));
            }
            Op::Sum(x) => {
                acc(*x, vec![g[0]; val(*x).len()]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Scale(x, f) => {
                acc(*x, g.iter().map(|v| v * f).collect());
            }
            Op::Objective { input, grad } => {
                acc(*input, grad.iter().map(|v| v * g[0]).collect());
            }
        }
    }

    /// Adds this tape's parameter gradients into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ModuleParams) -> Result<()> {
        if !self.backward_done {
            return Err(Error::State("no gradients recorded; run backward first".into()));
        }
        for (name, &v) in &self.params {
            let p = params.get_mut(name)?;
            if let Some(g) = self.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}
