//! Deterministic synthetic scenes: labelled box layouts with class height bands
//! and two feature volumes that see the scene differently.
//!
//! The camera-like volume carries class identity but its objects are displaced
//! along z by up to `cam_z_jitter` voxels and buried in stronger noise. The
//! lidar-like volume carries crisp occupancy and surface cues with only a faint
//! class signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{splitmix64, stream_seed};
use crate::tensor::{OccupancyGrid, VoxelTensor};
use crate::vsf::{Z_MAX_M, Z_MIN_M};

const BASIS_SEED: u64 = 0x00c0_ffee_0bad_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    /// Height band in meters; every voxel of the class lies inside it.
    pub band_m: (f64, f64),
    /// Footprint side length range in voxels (clamped to the grid).
    pub footprint: (usize, usize),
    /// Expected number of objects per scene.
    pub frequency: f64,
    /// Objects rest on the bottom of the band rather than floating inside it.
    #[serde(default = "yes")]
    pub grounded: bool,
    /// Label whose feature signature this class borrows; classes sharing one
    /// can only be told apart by shape and height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<u8>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid: [usize; 3],
    pub z_range_m: (f64, f64),
    pub cam_channels: usize,
    pub lidar_channels: usize,
    pub sigma_cam: f64,
    pub cam_z_jitter: usize,
    pub sigma_lidar: f64,
    /// Scale of the class signal mixed into the lidar-like volume.
    pub lidar_class_signal: f64,
    pub max_retries: usize,
    /// Class `i + 1` of the label space; label 0 is empty.
    pub classes: Vec<ClassProfile>,
}

fn class(name: &str, band_m: (f64, f64), footprint: (usize, usize), frequency: f64, grounded: bool) -> ClassProfile {
    ClassProfile { name: name.into(), band_m, footprint, frequency, grounded, appearance: None }
}

fn looks_like(c: ClassProfile, label: u8) -> ClassProfile {
    ClassProfile { appearance: Some(label), ..c }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: [24, 24, 16],
            z_range_m: (Z_MIN_M, Z_MAX_M),
            cam_channels: 8,
            lidar_channels: 8,
            sigma_cam: 0.5,
            cam_z_jitter: 1,
            sigma_lidar: 0.2,
            lidar_class_signal: 0.15,
            max_retries: 200,
            classes: vec![
                class("ground", (-3.0, -2.0), (24, 24), 1.0, true),
                class("barrier", (-2.0, -1.0), (1, 5), 3.0, true),
                class("pedestrian", (-2.0, 2.0), (1, 2), 4.0, true),
                class("car", (-2.0, 0.0), (3, 5), 2.0, true),
                looks_like(class("truck", (-2.0, 3.0), (4, 6), 1.0, true), 4),
                looks_like(class("vegetation", (-1.0, 3.0), (2, 4), 2.0, false), 3),
            ],
        }
    }
}

impl SceneConfig {
    /// Default classes on a smaller or larger X-Y grid, with object counts
    /// scaled by area (full-plane classes keep one instance).
    pub fn scaled_to(x: usize, y: usize) -> Self {
        let base = Self::default();
        let ratio = (x * y) as f64 / (base.grid[0] * base.grid[1]) as f64;
        let classes = base
            .classes
            .iter()
            .map(|c| {
                let full = c.footprint.0 >= base.grid[0];
                ClassProfile { frequency: if full { c.frequency } else { c.frequency * ratio }, ..c.clone() }
            })
            .collect();
        Self { grid: [x, y, base.grid[2]], classes, ..base }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn class_names(&self) -> Vec<&str> {
        std::iter::once("empty").chain(self.classes.iter().map(|c| c.name.as_str())).collect()
    }

    pub fn voxel_size_m(&self) -> f64 {
        (self.z_range_m.1 - self.z_range_m.0) / self.grid[2] as f64
    }

    /// Voxel index range `[lo, hi)` of a meter band, rejecting misaligned bands.
    pub fn band_voxels(&self, band_m: (f64, f64)) -> Result<(usize, usize)> {
        let v = self.voxel_size_m();
        let idx = |m: f64| {
            let f = (m - self.z_range_m.0) / v;
            ((f - f.round()).abs() < 1e-9 && f.round() >= 0.0).then_some(f.round() as usize)
        };
        match (idx(band_m.0), idx(band_m.1)) {
            (Some(lo), Some(hi)) if lo < hi && hi <= self.grid[2] => Ok((lo, hi)),
            _ => Err(Error::Config(format!(
                "height band [{}, {}] m is not a voxel-aligned sub-range of [{}, {}] m",
                band_m.0, band_m.1, self.z_range_m.0, self.z_range_m.1
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) || self.cam_channels == 0 || self.lidar_channels == 0 {
            return Err(Error::Config(format!("scene grid {:?} and channel counts must be positive", self.grid)));
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::Config("scene needs between 1 and 255 classes".into()));
        }
        if !(self.sigma_cam >= 0.0 && self.sigma_lidar >= 0.0 && self.lidar_class_signal >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        for c in &self.classes {
            if c.appearance.is_some_and(|a| a == 0 || a as usize > self.classes.len()) {
                return Err(Error::Config(format!("class '{}': appearance label out of range", c.name)));
            }
            self.band_voxels(c.band_m).map_err(|e| Error::Config(format!("class '{}': {e}", c.name)))?;
            if c.footprint.0 == 0 || c.footprint.0 > c.footprint.1 || !(c.frequency >= 0.0) {
                return Err(Error::Config(format!("class '{}': bad footprint or frequency", c.name)));
            }
        }
        Ok(())
    }
}

/// Axis-aligned half-open voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placed {
    pub label: u8,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub cam_dz: i64,
}

impl Placed {
    fn overlaps(&self, o: &Placed) -> bool {
        (0..3).all(|a| self.lo[a] < o.hi[a] && o.lo[a] < self.hi[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub gt: OccupancyGrid,
    pub feat_cam: VoxelTensor,
    pub feat_lidar: VoxelTensor,
    pub objects: Vec<Placed>,
    pub seed: u64,
}

fn camera_basis(k: usize, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut b = vec![0.0; k * channels];
    for row in b.chunks_exact_mut(channels).skip(1) {
        row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v *= 1.5 / norm);
    }
    b
}

fn layout(cfg: &SceneConfig, seed: u64) -> Result<Vec<Placed>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "layout"));
    let [gx, gy, _] = cfg.grid;
    let mut placed: Vec<Placed> = Vec::new();
    for (ci, c) in cfg.classes.iter().enumerate() {
        let (blo, bhi) = cfg.band_voxels(c.band_m)?;
        let mut count = c.frequency.floor() as usize;
        if rng.random::<f64>() < c.frequency.fract() {
            count += 1;
        }
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..cfg.max_retries.max(1) {
                let side = |rng: &mut ChaCha8Rng, g: usize| {
                    let (a, b) = (c.footprint.0.min(g), c.footprint.1.min(g));
                    rng.random_range(a..=b)
                };
                let (sx, sy) = (side(&mut rng, gx), side(&mut rng, gy));
                let x0 = rng.random_range(0..=gx - sx);
                let y0 = rng.random_range(0..=gy - sy);
                let width = bhi - blo;
                let h = rng.random_range(width.div_ceil(2).max(1)..=width);
                let z0 = if c.grounded { blo } else { rng.random_range(blo..=bhi - h) };
                let j = cfg.cam_z_jitter as i64;
                let cam_dz = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                // a surface covering the whole plane is registered exactly
                let cam_dz = if sx == gx && sy == gy { 0 } else { cam_dz };
                let b = Placed { label: (ci + 1) as u8, lo: [x0, y0, z0], hi: [x0 + sx, y0 + sy, z0 + h], cam_dz };
                if placed.iter().all(|p| !p.overlaps(&b)) {
                    placed.push(b);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::Generation {
                    seed,
                    reason: format!(
                        "could not place a '{}' object after {} attempts ({} objects placed)",
                        c.name,
                        cfg.max_retries,
                        placed.len()
                    ),
                });
            }
        }
    }
    Ok(placed)
}

fn paint(grid: &mut OccupancyGrid, b: &Placed, dz: i64, z: usize) {
    let lo = (b.lo[2] as i64 + dz).clamp(0, z as i64) as usize;
    let hi = (b.hi[2] as i64 + dz).clamp(0, z as i64) as usize;
    for x in b.lo[0]..b.hi[0] {
        for y in b.lo[1]..b.hi[1] {
            for zz in lo..hi {
                grid.set([0, x, y, zz], b.label);
            }
        }
    }
}

pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let [gx, gy, gz] = cfg.grid;
    let k = cfg.num_classes();
    let objects = layout(cfg, seed)?;
    let mut gt = OccupancyGrid::empty([1, gx, gy, gz]);
    let mut cam_labels = OccupancyGrid::empty([1, gx, gy, gz]);
    let look = |label: u8| cfg.classes[label as usize - 1].appearance.unwrap_or(label);
    for b in &objects {
        paint(&mut gt, b, 0, gz);
        paint(&mut cam_labels, &Placed { label: look(b.label), ..*b }, b.cam_dz, gz);
    }

    let basis = camera_basis(k, cfg.cam_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "cam"));
    let cam_noise = Normal::new(0.0, cfg.sigma_cam).map_err(|e| Error::Config(e.to_string()))?;
    let vol = gx * gy * gz;
    let mut cam = vec![0.0; cfg.cam_channels * vol];
    for c in 0..cfg.cam_channels {
        for v in 0..vol {
            let l = cam_labels.labels()[v] as usize;
            cam[c * vol + v] = basis[l * cfg.cam_channels + c] + cam_noise.sample(&mut rng);
        }
    }

    let occ = |x: i64, y: i64, z: i64| -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < gx
            && (y as usize) < gy
            && (z as usize) < gz
            && gt.get([0, x as usize, y as usize, z as usize]) != 0
    };
    let lidar_basis = camera_basis(k, cfg.lidar_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "lidar"));
    let lidar_noise = Normal::new(0.0, cfg.sigma_lidar).map_err(|e| Error::Config(e.to_string()))?;
    let mut lidar = vec![0.0; cfg.lidar_channels * vol];
    for x in 0..gx {
        for y in 0..gy {
            for z in 0..gz {
                let v = (x * gy + y) * gz + z;
                let l = gt.labels()[v];
                let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                let here = l != 0;
                let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !occ(xi + dx, yi + dy, zi + dz));
                let geo = [
                    here as u8 as f64,
                    (here && exposed) as u8 as f64,
                    (here && !occ(xi, yi, zi + 1)) as u8 as f64,
                    (here && (z == 0 || occ(xi, yi, zi - 1))) as u8 as f64,
                ];
                for c in 0..cfg.lidar_channels {
                    let signal = if c < geo.len() {
                        geo[c]
                    } else {
                        let a = if here { look(l) as usize } else { 0 };
                        cfg.lidar_class_signal * lidar_basis[a * cfg.lidar_channels + c]
                    };
                    lidar[c * vol + v] = signal + lidar_noise.sample(&mut rng);
                }
            }
        }
    }

    Ok(SceneSample {
        gt,
        feat_cam: VoxelTensor::new([1, cfg.cam_channels, gx, gy, gz], cam)?,
        feat_lidar: VoxelTensor::new([1, cfg.lidar_channels, gx, gy, gz], lidar)?,
        objects,
        seed,
    })
}

const SEED_BITS: u64 = (1 << 62) - 1;

/// A lazily generated, reproducible sequence of scenes.
#[derive(Debug, Clone)]
pub struct SampleStream {
    cfg: SceneConfig,
    first: u64,
    tag: u64,
    len: usize,
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seed(&self, i: usize) -> u64 {
        (self.first.wrapping_add(i as u64) & SEED_BITS) | self.tag
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.len).map(|i| self.seed(i)).collect()
    }

    pub fn get(&self, i: usize) -> Result<SceneSample> {
        if i >= self.len {
            return Err(Error::Validation(format!("sample {i} out of range for stream of {}", self.len)));
        }
        generate(&self.cfg, self.seed(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Train and validation streams over disjoint seed ranges (distinct top bits).
/// The validation stream does not depend on `n_train`.
pub fn dataset(
    cfg: &SceneConfig,
    n_train: usize,
    n_val: usize,
    base_seed: u64,
) -> Result<(SampleStream, SampleStream)> {
    cfg.validate()?;
    let first = splitmix64(base_seed) & SEED_BITS;
    let train = SampleStream { cfg: cfg.clone(), first, tag: 0, len: n_train };
    let val = SampleStream { cfg: cfg.clone(), first, tag: 1 << 62, len: n_val };
    Ok((train, val))
}

/// Nearest-centroid probe accuracies for each modality on two tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub occupancy_lidar: f64,
    pub occupancy_cam: f64,
    pub class_lidar: f64,
    pub class_cam: f64,
}

fn voxel_features(t: &VoxelTensor, v: usize) -> Vec<f64> {
    let [_, c, x, y, z] = t.dims();
    let vol = x * y * z;
    (0..c).map(|ch| t.data()[ch * vol + v]).collect()
}

fn centroid_probe(
    train: &[SceneSample],
    test: &[SceneSample],
    feat: fn(&SceneSample) -> &VoxelTensor,
    target: fn(u8) -> Option<usize>,
    n: usize,
) -> f64 {
    let c = feat(&train[0]).channels();
    let mut sums = vec![vec![0.0; c]; n];
    let mut counts = vec![0usize; n];
    for s in train {
        for (v, &l) in s.gt.labels().iter().enumerate() {
            if let Some(t) = target(l) {
                let f = voxel_features(feat(s), v);
                sums[t].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
                counts[t] += 1;
            }
        }
    }
    for (s, &k) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for s in test {
        for (v, &l) in s.gt.labels().iter().enumerate() {
            let Some(t) = target(l) else { continue };
            let f = voxel_features(feat(s), v);
            let best = (0..n)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| {
                    let d = |k: usize| sums[k].iter().zip(&f).map(|(m, x)| (m - x) * (m - x)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap_or(0);
            hit += (best == t) as usize;
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Fits centroids on `train_seeds` and scores per-voxel predictions on `test_seeds`.
pub fn modal_probe(cfg: &SceneConfig, train_seeds: &[u64], test_seeds: &[u64]) -> Result<ProbeReport> {
    let train: Vec<_> = train_seeds.iter().map(|&s| generate(cfg, s)).collect::<Result<_>>()?;
    let test: Vec<_> = test_seeds.iter().map(|&s| generate(cfg, s)).collect::<Result<_>>()?;
    let occupied = |l: u8| Some((l != 0) as usize);
    let class = |l: u8| (l != 0).then_some(l as usize);
    let k = cfg.num_classes();
    Ok(ProbeReport {
        occupancy_lidar: centroid_probe(&train, &test, |s| &s.feat_lidar, occupied, 2),
        occupancy_cam: centroid_probe(&train, &test, |s| &s.feat_cam, occupied, 2),
        class_lidar: centroid_probe(&train, &test, |s| &s.feat_lidar, class, k),
        class_cam: centroid_probe(&train, &test, |s| &s.feat_cam, class, k),
    })
}
