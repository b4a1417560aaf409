//! Dense containers shared by every module.
//!
//! All volumes use one row-major layout, `[B, C, X, Y, Z]`, with `Z` (height)
//! varying fastest. Height planes are therefore contiguous runs of length `Z`
//! and the kernels in [`crate::ops`] are written around that fact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(B, C, X, Y, Z)`.
pub type Dims5 = [usize; 5];

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Rank-5 feature volume with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTensor {
    dims: Dims5,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl VoxelTensor {
    pub fn new(dims: Dims5, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!("voxel dims must be positive, got {dims:?}")));
        }
        if data.len() != numel(&dims) {
            return Err(Error::shape("VoxelTensor::new", dims, format!("len {}", data.len())));
        }
        Ok(Self { dims, data, grad: None })
    }

    pub fn zeros(dims: Dims5) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims5, value: f64) -> Self {
        Self { dims, data: vec![value; numel(&dims)], grad: None }
    }

    /// Uniform values in `[-1, 1)` from a seeded stream.
    pub fn random(dims: Dims5, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..numel(&dims)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { dims, data, grad: None }
    }

    pub fn from_fn(dims: Dims5, mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let [b, c, x, y, z] = dims;
        let mut data = Vec::with_capacity(numel(&dims));
        for bi in 0..b {
            for ci in 0..c {
                for xi in 0..x {
                    for yi in 0..y {
                        for zi in 0..z {
                            data.push(f([bi, ci, xi, yi, zi]));
                        }
                    }
                }
            }
        }
        Self { dims, data, grad: None }
    }

    pub fn dims(&self) -> Dims5 {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.dims[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("VoxelTensor::set_grad", self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn offset(&self, idx: [usize; 5]) -> usize {
        offset5(&self.dims, idx)
    }

    pub fn get(&self, idx: [usize; 5]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders height planes: output plane `z` is input plane `perm[z]`.
    pub fn permute_z(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.dims[4], "permutation length must equal Z");
        let z = self.dims[4];
        let mut data = vec![0.0; self.data.len()];
        for (dst, src) in data.chunks_exact_mut(z).zip(self.data.chunks_exact(z)) {
            for (zi, &p) in perm.iter().enumerate() {
                dst[zi] = src[p];
            }
        }
        Self { dims: self.dims, data, grad: None }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn offset5(dims: &Dims5, [b, c, x, y, z]: [usize; 5]) -> usize {
    debug_assert!(b < dims[0] && c < dims[1] && x < dims[2] && y < dims[3] && z < dims[4]);
    (((b * dims[1] + c) * dims[2] + x) * dims[3] + y) * dims[4] + z
}

/// Per-height channel profile `[B, C, Z]` produced by pooling over the X-Y plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneProfile {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl PlaneProfile {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(&dims) {
            return Err(Error::shape("PlaneProfile::new", dims, format!("len {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self { dims, data: vec![value; numel(&dims)] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, c: usize, z: usize) -> f64 {
        self.data[(b * self.dims[1] + c) * self.dims[2] + z]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Integer label volume `[B, X, Y, Z]`; label 0 is empty space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: [usize; 4],
    labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 4], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != numel(&dims) {
            return Err(Error::shape("OccupancyGrid::new", dims, format!("len {}", labels.len())));
        }
        Ok(Self { dims, labels })
    }

    pub fn empty(dims: [usize; 4]) -> Self {
        Self { dims, labels: vec![0; numel(&dims)] }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn offset(&self, [b, x, y, z]: [usize; 4]) -> usize {
        ((b * self.dims[1] + x) * self.dims[2] + y) * self.dims[3] + z
    }

    pub fn get(&self, idx: [usize; 4]) -> u8 {
        self.labels[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], label: u8) {
        let o = self.offset(idx);
        self.labels[o] = label;
    }

    /// Checks every label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= num_classes) {
            Some(i) => Err(Error::Validation(format!(
                "label {} at flat index {i} is outside [0, {num_classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    /// Stacks single-item grids along the batch axis.
    pub fn stack(items: &[&OccupancyGrid]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Validation("cannot stack zero grids".into()))?;
        let [_, x, y, z] = first.dims;
        let mut labels = Vec::with_capacity(items.len() * x * y * z);
        let mut b = 0;
        for g in items {
            if g.dims[1..] != first.dims[1..] {
                return Err(Error::shape("OccupancyGrid::stack", first.dims, g.dims));
            }
            labels.extend_from_slice(&g.labels);
            b += g.dims[0];
        }
        Ok(Self { dims: [b, x, y, z], labels })
    }
}

/// Concatenates volumes along the batch axis.
pub fn stack_batch(items: &[&VoxelTensor]) -> Result<VoxelTensor> {
    let first = items.first().ok_or_else(|| Error::Validation("cannot stack zero tensors".into()))?;
    let mut dims = first.dims;
    let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
    dims[0] = 0;
    for t in items {
        if t.dims[1..] != first.dims[1..] {
            return Err(Error::shape("stack_batch", first.dims, t.dims));
        }
        data.extend_from_slice(&t.data);
        dims[0] += t.dims[0];
    }
    VoxelTensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(VoxelTensor::new([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(VoxelTensor::new([1, 0, 2, 2, 2], vec![]).is_err());
        assert!(PlaneProfile::new([1, 2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn offsets_are_row_major_with_z_fastest() {
        let t = VoxelTensor::from_fn([2, 3, 4, 5, 6], |[b, c, x, y, z]| {
            (b * 10000 + c * 1000 + x * 100 + y * 10 + z) as f64
        });
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[6], 10.0);
        assert_eq!(t.get([1, 2, 3, 4, 5]), 12345.0);
        assert_eq!(t.offset([1, 2, 3, 4, 5]), t.data().len() - 1);
    }

    #[test]
    fn grad_slot_must_match() {
        let mut t = VoxelTensor::zeros([1, 1, 1, 1, 3]);
        assert!(t.set_grad(vec![1.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn label_validation_names_offender() {
        let g = OccupancyGrid::new([1, 1, 1, 3], vec![0, 7, 2]).unwrap();
        let msg = g.validate(7).unwrap_err().to_string();
        assert!(msg.contains("label 7"), "{msg}");
        g.validate(8).unwrap();
    }
}
