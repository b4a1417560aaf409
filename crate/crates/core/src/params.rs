//! Named parameter sets.
//!
//! Every tensor is initialised from its own stream keyed by `(seed, name)`, so
//! two models that share a parameter name start from identical values no matter
//! which other parameters they own. The ablation harness relies on this to keep
//! variants paired.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::numel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::shape("Param::new", &shape, format!("len {}", values.len())));
        }
        let grad = vec![0.0; values.len()];
        Ok(Self { shape, values, grad })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, values: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// FNV-1a over the name, folded into the seed with a splitmix finaliser.
pub(crate) fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    pub rng_seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ModuleParams {
    pub fn new(rng_seed: u64) -> Self {
        Self { rng_seed, entries: BTreeMap::new() }
    }

    /// Adds a tensor drawn from `U(-bound, bound)`.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.rng_seed, name));
        let values = (0..numel(&shape)).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Param::new(shape, values)?)
    }

    /// Conv kernel `[c_out, c_in, k, k, k]` plus bias `[c_out]`, both within `1 / sqrt(fan_in)`.
    pub fn init_conv3d(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k * k).max(1) as f64).sqrt();
        self.init_uniform(&format!("{prefix}.weight"), vec![c_out, c_in, k, k, k], bound)?;
        self.init_uniform(&format!("{prefix}.bias"), vec![c_out], bound)
    }

    /// Channel-mixing kernel `[c_out, c_in, 1]` plus bias, both within `1 / sqrt(c_in)`.
    pub fn init_conv1d(&mut self, prefix: &str, c_out: usize, c_in: usize) -> Result<()> {
        let bound = 1.0 / (c_in.max(1) as f64).sqrt();
        self.init_uniform(&format!("{prefix}.weight"), vec![c_out, c_in, 1], bound)?;
        self.init_uniform(&format!("{prefix}.bias"), vec![c_out], bound)
    }

    pub fn insert(&mut self, name: &str, param: Param) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter name '{name}'")));
        }
        self.entries.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::Validation(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::Validation(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.clear();
            p.grad.resize(p.values.len(), 0.0);
        }
    }

    /// Sets every value of every parameter to zero (useful for structural checks).
    pub fn zero_values(&mut self) {
        for p in self.entries.values_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ModuleParams::new(3);
        a.init_conv3d("enc.0", 4, 2, 3).unwrap();
        a.init_conv1d("se.reduce", 1, 4).unwrap();
        let mut b = ModuleParams::new(3);
        b.init_conv1d("se.reduce", 1, 4).unwrap();
        b.init_conv3d("enc.0", 4, 2, 3).unwrap();
        assert_eq!(a, b);

        let mut c = ModuleParams::new(4);
        c.init_conv3d("enc.0", 4, 2, 3).unwrap();
        assert_ne!(a.get("enc.0.weight").unwrap(), c.get("enc.0.weight").unwrap());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut p = ModuleParams::new(0);
        p.init_conv3d("c", 8, 8, 3).unwrap();
        let bound = 1.0 / (8.0f64 * 27.0).sqrt();
        let w = &p.get("c.weight").unwrap().values;
        assert!(w.iter().all(|v| v.abs() < bound));
        assert!(w.iter().any(|v| v.abs() > 0.9 * bound));
        assert!(p.get("c.bias").unwrap().values.iter().all(|v| v.abs() < bound));
        assert_eq!(p.get("c.bias").unwrap().shape, vec![8]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModuleParams::new(0);
        p.init_conv1d("x", 2, 2).unwrap();
        assert!(p.init_conv1d("x", 2, 2).is_err());
        assert!(p.get("missing").is_err());
    }
}
