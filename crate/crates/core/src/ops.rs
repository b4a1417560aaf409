//! Forward and backward kernels for the fixed op vocabulary.
//!
//! The raw kernels work on flat slices and are shared by the recording tape
//! ([`crate::tape`]) and by the eager wrappers at the bottom of this file.
//!
//! `conv3d` pads each channel volume once and then evaluates every kernel tap
//! as one long contiguous pass over the padded buffer. Outputs that land on
//! the padding ring are garbage and are dropped when unpadding; gradients fed
//! back through the same layout are zero on that ring, which makes the input
//! gradient a plain convolution with the flipped, transposed kernel.

use crate::error::{Error, Result};
use crate::params::Param;
use crate::tensor::{numel, Dims5, PlaneProfile, VoxelTensor};

/// Geometry of a same-padded cubic convolution over one `[X, Y, Z]` volume.
#[derive(Debug, Clone, Copy)]
struct Padded {
    spatial: [usize; 3],
    padded: [usize; 3],
    pad: usize,
    k: usize,
}

impl Padded {
    fn new(spatial: [usize; 3], k: usize) -> Self {
        let pad = k / 2;
        Self { spatial, padded: spatial.map(|d| d + 2 * pad), pad, k }
    }

    fn len(&self) -> usize {
        numel(&self.padded)
    }

    fn stride_x(&self) -> usize {
        self.padded[1] * self.padded[2]
    }

    /// Half-open flat range covering every interior (valid) output position.
    fn valid_range(&self) -> (usize, usize) {
        let [x, y, z] = self.spatial;
        let p = self.pad;
        let sx = self.stride_x();
        let sy = self.padded[2];
        let lo = p * sx + p * sy + p;
        let hi = (x - 1 + p) * sx + (y - 1 + p) * sy + (z - 1 + p) + 1;
        (lo, hi)
    }

    /// Flat offset of each kernel tap relative to the output position, in
    /// kernel order (dx slowest, dz fastest).
    fn tap_offsets(&self) -> Vec<isize> {
        let p = self.pad as isize;
        let sx = self.stride_x() as isize;
        let sy = self.padded[2] as isize;
        let mut offs = Vec::with_capacity(self.k * self.k * self.k);
        for dx in -p..=p {
            for dy in -p..=p {
                for dz in -p..=p {
                    offs.push(dx * sx + dy * sy + dz);
                }
            }
        }
        offs
    }

    fn pad_into(&self, src: &[f64], dst: &mut [f64]) {
        let [x, y, z] = self.spatial;
        let p = self.pad;
        let sx = self.stride_x();
        let sy = self.padded[2];
        for xi in 0..x {
            for yi in 0..y {
                let s = (xi * y + yi) * z;
                let d = (xi + p) * sx + (yi + p) * sy + p;
                dst[d..d + z].copy_from_slice(&src[s..s + z]);
            }
        }
    }

    fn unpad_into(&self, src: &[f64], dst: &mut [f64]) {
        let [x, y, z] = self.spatial;
        let p = self.pad;
        let sx = self.stride_x();
        let sy = self.padded[2];
        for xi in 0..x {
            for yi in 0..y {
                let d = (xi * y + yi) * z;
                let s = (xi + p) * sx + (yi + p) * sy + p;
                dst[d..d + z].copy_from_slice(&src[s..s + z]);
            }
        }
    }
}

/// `out[q] += sum_t w[t] * inp[q + off[t]]` for q in the valid range.
fn accumulate_taps(geo: &Padded, offs: &[isize], w: &[f64], inp: &[f64], out: &mut [f64]) {
    let (lo, hi) = geo.valid_range();
    let n = hi - lo;
    let out = &mut out[lo..hi];
    if geo.k == 3 {
        // Fuse the nine (dy, dz) taps of each dx row into one pass.
        for row in 0..3 {
            let w9 = &w[row * 9..row * 9 + 9];
            let s: [&[f64]; 9] = std::array::from_fn(|t| {
                let start = (lo as isize + offs[row * 9 + t]) as usize;
                &inp[start..start + n]
            });
            for (i, o) in out.iter_mut().enumerate() {
                let mut v = *o;
                v += w9[0] * s[0][i];
                v += w9[1] * s[1][i];
                v += w9[2] * s[2][i];
                v += w9[3] * s[3][i];
                v += w9[4] * s[4][i];
                v += w9[5] * s[5][i];
                v += w9[6] * s[6][i];
                v += w9[7] * s[7][i];
                v += w9[8] * s[8][i];
                *o = v;
            }
        }
    } else {
        for (&wt, &off) in w.iter().zip(offs) {
            if wt == 0.0 {
                continue;
            }
            let start = (lo as isize + off) as usize;
            let s = &inp[start..start + n];
            for (o, &v) in out.iter_mut().zip(s) {
                *o += wt * v;
            }
        }
    }
}

/// `acc[t] += sum_q g[q] * inp[q + off[t]]` over the valid range.
fn correlate_taps(geo: &Padded, offs: &[isize], g: &[f64], inp: &[f64], acc: &mut [f64]) {
    let (lo, hi) = geo.valid_range();
    let n = hi - lo;
    let g = &g[lo..hi];
    if geo.k == 3 {
        // Nine taps per pass, two lanes each: the accumulators fit in registers.
        for row in 0..3 {
            let s: [&[f64]; 9] = std::array::from_fn(|t| {
                let start = (lo as isize + offs[row * 9 + t]) as usize;
                &inp[start..start + n]
            });
            let mut lanes = [[0.0f64; 2]; 9];
            let full = n / 2 * 2;
            for base in (0..full).step_by(2) {
                let (g0, g1) = (g[base], g[base + 1]);
                for t in 0..9 {
                    lanes[t][0] += g0 * s[t][base];
                    lanes[t][1] += g1 * s[t][base + 1];
                }
            }
            for t in 0..9 {
                let tail = if full < n { g[full] * s[t][full] } else { 0.0 };
                acc[row * 9 + t] += (lanes[t][0] + lanes[t][1]) + tail;
            }
        }
        return;
    }
    for (a, &off) in acc.iter_mut().zip(offs) {
        let start = (lo as isize + off) as usize;
        *a += dot(g, &inp[start..start + n]);
    }
}

/// Four-lane dot product with a fixed reduction order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Validated shape of a conv3d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dShape {
    pub input: Dims5,
    pub c_out: usize,
    pub k: usize,
}

impl Conv3dShape {
    pub fn check(input: Dims5, kernel: &[usize], bias: &[usize]) -> Result<Self> {
        let ok = kernel.len() == 5
            && kernel[1] == input[1]
            && kernel[2] == kernel[3]
            && kernel[3] == kernel[4]
            && kernel[2] % 2 == 1;
        if !ok {
            return Err(Error::shape("conv3d", input, kernel));
        }
        if bias != [kernel[0]] {
            return Err(Error::shape("conv3d bias", kernel, bias));
        }
        Ok(Self { input, c_out: kernel[0], k: kernel[2] })
    }

    pub fn output(&self) -> Dims5 {
        let [b, _, x, y, z] = self.input;
        [b, self.c_out, x, y, z]
    }
}

pub fn conv3d_forward(shape: Conv3dShape, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let [b, c_in, sx, sy, sz] = shape.input;
    let c_out = shape.c_out;
    let vol = sx * sy * sz;
    let k3 = shape.k.pow(3);
    let geo = Padded::new([sx, sy, sz], shape.k);
    let offs = geo.tap_offsets();
    let plen = geo.len();

    let mut out = vec![0.0; b * c_out * vol];
    let mut padded_in = vec![0.0; c_in * plen];
    let mut acc = vec![0.0; plen];
    for bi in 0..b {
        for ci in 0..c_in {
            let src = &x[(bi * c_in + ci) * vol..][..vol];
            geo.pad_into(src, &mut padded_in[ci * plen..(ci + 1) * plen]);
        }
        for co in 0..c_out {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..c_in {
                let wk = &w[(co * c_in + ci) * k3..][..k3];
                accumulate_taps(&geo, &offs, wk, &padded_in[ci * plen..(ci + 1) * plen], &mut acc);
            }
            let dst = &mut out[(bi * c_out + co) * vol..][..vol];
            geo.unpad_into(&acc, dst);
            let bv = bias[co];
            dst.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub struct Conv3dGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv3d_backward(shape: Conv3dShape, x: &[f64], w: &[f64], gout: &[f64], need_input: bool) -> Conv3dGrads {
    let [b, c_in, sx, sy, sz] = shape.input;
    let c_out = shape.c_out;
    let vol = sx * sy * sz;
    let k3 = shape.k.pow(3);
    let geo = Padded::new([sx, sy, sz], shape.k);
    let offs = geo.tap_offsets();
    let plen = geo.len();

    // Flipped kernel with in/out channels swapped, laid out [c_in, c_out, k3].
    let flipped: Vec<f64> = if need_input {
        let mut f = vec![0.0; c_in * c_out * k3];
        for co in 0..c_out {
            for ci in 0..c_in {
                let src = &w[(co * c_in + ci) * k3..][..k3];
                let dst = &mut f[(ci * c_out + co) * k3..][..k3];
                for (t, v) in src.iter().rev().enumerate() {
                    dst[t] = *v;
                }
            }
        }
        f
    } else {
        Vec::new()
    };

    let mut gw = vec![0.0; c_out * c_in * k3];
    let mut gb = vec![0.0; c_out];
    let mut gx = need_input.then(|| vec![0.0; b * c_in * vol]);
    let mut padded_in = vec![0.0; c_in * plen];
    let mut padded_g = vec![0.0; c_out * plen];
    let mut acc = vec![0.0; plen];

    for bi in 0..b {
        for ci in 0..c_in {
            let src = &x[(bi * c_in + ci) * vol..][..vol];
            geo.pad_into(src, &mut padded_in[ci * plen..(ci + 1) * plen]);
        }
        for co in 0..c_out {
            let src = &gout[(bi * c_out + co) * vol..][..vol];
            gb[co] += src.iter().sum::<f64>();
            geo.pad_into(src, &mut padded_g[co * plen..(co + 1) * plen]);
        }
        for co in 0..c_out {
            let g = &padded_g[co * plen..(co + 1) * plen];
            for ci in 0..c_in {
                let inp = &padded_in[ci * plen..(ci + 1) * plen];
                correlate_taps(&geo, &offs, g, inp, &mut gw[(co * c_in + ci) * k3..][..k3]);
            }
        }
        if let Some(gx) = gx.as_mut() {
            for ci in 0..c_in {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..c_out {
                    let wk = &flipped[(ci * c_out + co) * k3..][..k3];
                    accumulate_taps(&geo, &offs, wk, &padded_g[co * plen..(co + 1) * plen], &mut acc);
                }
                geo.unpad_into(&acc, &mut gx[(bi * c_in + ci) * vol..][..vol]);
            }
        }
    }
    Conv3dGrads { input: gx, weight: gw, bias: gb }
}

/// Checks a `[c_out, c_in, 1]` kernel against a `[B, c_in, Z]` profile.
pub fn conv1d_shape(input: [usize; 3], kernel: &[usize], bias: &[usize]) -> Result<[usize; 3]> {
    if kernel.len() != 3 || kernel[2] != 1 || kernel[1] != input[1] {
        return Err(Error::shape("conv1d_channel", input, kernel));
    }
    if bias != [kernel[0]] {
        return Err(Error::shape("conv1d_channel bias", kernel, bias));
    }
    Ok([input[0], kernel[0], input[2]])
}

pub fn conv1d_forward(input: [usize; 3], c_out: usize, s: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let [b, c_in, z] = input;
    let mut out = vec![0.0; b * c_out * z];
    for bi in 0..b {
        for co in 0..c_out {
            let dst = &mut out[(bi * c_out + co) * z..][..z];
            dst.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..c_in {
                let wv = w[co * c_in + ci];
                let src = &s[(bi * c_in + ci) * z..][..z];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wv * v;
                }
            }
        }
    }
    out
}

pub fn conv1d_backward(
    input: [usize; 3],
    c_out: usize,
    s: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c_in, z] = input;
    let mut gs = vec![0.0; s.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for bi in 0..b {
        for co in 0..c_out {
            let g = &gout[(bi * c_out + co) * z..][..z];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..c_in {
                let src = &s[(bi * c_in + ci) * z..][..z];
                gw[co * c_in + ci] += dot(g, src);
                let wv = w[co * c_in + ci];
                let dst = &mut gs[(bi * c_in + ci) * z..][..z];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    (gs, gw, gb)
}

/// Largest f64 below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept inside the open unit interval even where f64 would
/// round to 0 or 1.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Mean over the X-Y plane: `[B, C, X, Y, Z] -> [B, C, Z]`.
pub fn squeeze_xy_forward(dims: Dims5, x: &[f64]) -> Vec<f64> {
    let [b, c, sx, sy, z] = dims;
    let plane = sx * sy;
    let mut out = vec![0.0; b * c * z];
    for (bc, dst) in out.chunks_exact_mut(z).enumerate() {
        let src = &x[bc * plane * z..][..plane * z];
        for row in src.chunks_exact(z) {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = plane as f64;
        dst.iter_mut().for_each(|d| *d /= inv);
    }
    out
}

pub fn squeeze_xy_backward(dims: Dims5, gout: &[f64]) -> Vec<f64> {
    let [_, _, sx, sy, z] = dims;
    let plane = sx * sy;
    let mut gx = vec![0.0; numel(&dims)];
    for (bc, g) in gout.chunks_exact(z).enumerate() {
        let dst = &mut gx[bc * plane * z..][..plane * z];
        for row in dst.chunks_exact_mut(z) {
            for (d, &gv) in row.iter_mut().zip(g) {
                *d = gv / plane as f64;
            }
        }
    }
    gx
}

/// Mean over X, Y and Z: `[B, C, X, Y, Z] -> [B, C, 1]`.
///
/// Sums run over X-Y rows first and then over z, so at `Z = 1` the result is
/// bitwise identical to [`squeeze_xy_forward`].
pub fn squeeze_xyz_forward(dims: Dims5, x: &[f64]) -> Vec<f64> {
    let z = dims[4];
    squeeze_xy_forward(dims, x)
        .chunks_exact(z)
        .map(|row| {
            let s: f64 = row.iter().sum();
            s / z as f64
        })
        .collect()
}

pub fn squeeze_xyz_backward(dims: Dims5, gout: &[f64]) -> Vec<f64> {
    let [_, _, sx, sy, z] = dims;
    let n = (sx * sy * z) as f64;
    let per = sx * sy * z;
    let mut gx = vec![0.0; numel(&dims)];
    for (bc, &g) in gout.iter().enumerate() {
        gx[bc * per..(bc + 1) * per].iter_mut().for_each(|d| *d = g / n);
    }
    gx
}

/// `y[b,c,i,j,z] = x[b,c,i,j,z] * gate[b,c,z]`.
pub fn mul_broadcast_forward(dims: Dims5, x: &[f64], gate: &[f64]) -> Vec<f64> {
    let [_, _, sx, sy, z] = dims;
    let plane = sx * sy;
    let mut out = vec![0.0; x.len()];
    for (bc, g) in gate.chunks_exact(z).enumerate() {
        let src = &x[bc * plane * z..][..plane * z];
        let dst = &mut out[bc * plane * z..][..plane * z];
        for (drow, srow) in dst.chunks_exact_mut(z).zip(src.chunks_exact(z)) {
            for ((d, &s), &gv) in drow.iter_mut().zip(srow).zip(g) {
                *d = s * gv;
            }
        }
    }
    out
}

pub fn mul_broadcast_backward(dims: Dims5, x: &[f64], gate: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [_, _, sx, sy, z] = dims;
    let plane = sx * sy;
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; gate.len()];
    for (bc, g) in gate.chunks_exact(z).enumerate() {
        let xs = &x[bc * plane * z..][..plane * z];
        let gos = &gout[bc * plane * z..][..plane * z];
        let gxs = &mut gx[bc * plane * z..][..plane * z];
        let acc = &mut gg[bc * z..][..z];
        for ((xr, gr), dr) in xs.chunks_exact(z).zip(gos.chunks_exact(z)).zip(gxs.chunks_exact_mut(z)) {
            for zi in 0..z {
                dr[zi] = gr[zi] * g[zi];
                acc[zi] += gr[zi] * xr[zi];
            }
        }
    }
    (gx, gg)
}

/// `y[b,c,i,j,z] = x[b,c,i,j,z] * map[b,0,i,j,z]`.
pub fn mul_map_forward(dims: Dims5, x: &[f64], map: &[f64]) -> Vec<f64> {
    let [b, c, ..] = dims;
    let vol = numel(&dims[2..]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let m = &map[bi * vol..][..vol];
        for ci in 0..c {
            let o = (bi * c + ci) * vol;
            for ((d, &s), &mv) in out[o..o + vol].iter_mut().zip(&x[o..o + vol]).zip(m) {
                *d = s * mv;
            }
        }
    }
    out
}

pub fn mul_map_backward(dims: Dims5, x: &[f64], map: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, ..] = dims;
    let vol = numel(&dims[2..]);
    let mut gx = vec![0.0; x.len()];
    let mut gm = vec![0.0; map.len()];
    for bi in 0..b {
        let m = &map[bi * vol..][..vol];
        let gmb = &mut gm[bi * vol..][..vol];
        for ci in 0..c {
            let o = (bi * c + ci) * vol;
            for i in 0..vol {
                gx[o + i] = gout[o + i] * m[i];
                gmb[i] += gout[o + i] * x[o + i];
            }
        }
    }
    (gx, gm)
}

/// Softmax across the channel axis at every voxel.
pub fn softmax_channels_forward(dims: Dims5, x: &[f64]) -> Vec<f64> {
    let [b, c, ..] = dims;
    let vol = numel(&dims[2..]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * c * vol;
        for v in 0..vol {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * vol + v]);
            }
            let mut s = 0.0;
            for ci in 0..c {
                let e = (x[base + ci * vol + v] - m).exp();
                out[base + ci * vol + v] = e;
                s += e;
            }
            for ci in 0..c {
                out[base + ci * vol + v] /= s;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(dims: Dims5, y: &[f64], gout: &[f64]) -> Vec<f64> {
    let [b, c, ..] = dims;
    let vol = numel(&dims[2..]);
    let mut gx = vec![0.0; y.len()];
    for bi in 0..b {
        let base = bi * c * vol;
        for v in 0..vol {
            let mut s = 0.0;
            for ci in 0..c {
                let i = base + ci * vol + v;
                s += gout[i] * y[i];
            }
            for ci in 0..c {
                let i = base + ci * vol + v;
                gx[i] = y[i] * (gout[i] - s);
            }
        }
    }
    gx
}

/// Copies channels `[lo, hi)`.
pub fn slice_channels_forward(dims: Dims5, x: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let [b, c, ..] = dims;
    let vol = numel(&dims[2..]);
    let mut out = Vec::with_capacity(b * (hi - lo) * vol);
    for bi in 0..b {
        out.extend_from_slice(&x[(bi * c + lo) * vol..(bi * c + hi) * vol]);
    }
    out
}

pub fn concat_channels_forward(a_dims: Dims5, a: &[f64], b_dims: Dims5, b: &[f64]) -> Vec<f64> {
    let batch = a_dims[0];
    let vol = numel(&a_dims[2..]);
    let (ca, cb) = (a_dims[1], b_dims[1]);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..batch {
        out.extend_from_slice(&a[bi * ca * vol..(bi + 1) * ca * vol]);
        out.extend_from_slice(&b[bi * cb * vol..(bi + 1) * cb * vol]);
    }
    out
}

/// Copies height planes `[lo, hi)`.
pub fn slice_z_forward(dims: Dims5, x: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let z = dims[4];
    let mut out = Vec::with_capacity(x.len() / z * (hi - lo));
    for row in x.chunks_exact(z) {
        out.extend_from_slice(&row[lo..hi]);
    }
    out
}

/// Adds `part` (height `hi - lo`) into planes `[lo, hi)` of `dst` (height `z`).
pub fn place_z(dst: &mut [f64], z: usize, part: &[f64], lo: usize, hi: usize) {
    let w = hi - lo;
    for (drow, srow) in dst.chunks_exact_mut(z).zip(part.chunks_exact(w)) {
        for (d, &s) in drow[lo..hi].iter_mut().zip(srow) {
            *d += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Eager wrappers.

pub fn conv3d(x: &VoxelTensor, kernel: &Param, bias: &Param) -> Result<VoxelTensor> {
    let shape = Conv3dShape::check(x.dims(), &kernel.shape, &bias.shape)?;
    let out = conv3d_forward(shape, x.data(), &kernel.values, &bias.values);
    VoxelTensor::new(shape.output(), out)
}

pub fn conv1d_channel(s: &PlaneProfile, kernel: &Param, bias: &Param) -> Result<PlaneProfile> {
    let out_dims = conv1d_shape(s.dims(), &kernel.shape, &bias.shape)?;
    let out = conv1d_forward(s.dims(), out_dims[1], s.data(), &kernel.values, &bias.values);
    PlaneProfile::new(out_dims, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

impl Pointwise {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Pointwise::Relu => relu(v),
            Pointwise::Sigmoid => sigmoid(v),
        }
    }
}

pub fn pointwise(x: &VoxelTensor, f: Pointwise) -> VoxelTensor {
    x.map(|v| f.apply(v))
}

pub fn concat_channels(a: &VoxelTensor, b: &VoxelTensor) -> Result<VoxelTensor> {
    let (da, db) = (a.dims(), b.dims());
    if da[0] != db[0] || da[2..] != db[2..] {
        return Err(Error::shape("concat_channels", da, db));
    }
    let out = concat_channels_forward(da, a.data(), db, b.data());
    VoxelTensor::new([da[0], da[1] + db[1], da[2], da[3], da[4]], out)
}

pub fn slice_channels(x: &VoxelTensor, lo: usize, hi: usize) -> Result<VoxelTensor> {
    let d = x.dims();
    if lo >= hi || hi > d[1] {
        return Err(Error::shape("slice_channels", d, (lo, hi)));
    }
    VoxelTensor::new([d[0], hi - lo, d[2], d[3], d[4]], slice_channels_forward(d, x.data(), lo, hi))
}

pub fn mul_broadcast(x: &VoxelTensor, gate: &PlaneProfile) -> Result<VoxelTensor> {
    let (d, g) = (x.dims(), gate.dims());
    if g != [d[0], d[1], d[4]] {
        return Err(Error::shape("mul_broadcast", d, g));
    }
    VoxelTensor::new(d, mul_broadcast_forward(d, x.data(), gate.data()))
}

pub fn squeeze_xy(x: &VoxelTensor) -> PlaneProfile {
    let d = x.dims();
    PlaneProfile::new([d[0], d[1], d[4]], squeeze_xy_forward(d, x.data())).expect("pooled shape")
}
