//! Training objectives on per-voxel class probabilities `[B, K, X, Y, Z]`.
//!
//! Each loss is an [`Objective`] so it can terminate a tape; the eager
//! functions evaluate the same code on a concrete tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::splitmix64;
use crate::tape::{Evaluation, Objective, Tape, Var};
use crate::tensor::{Dims5, OccupancyGrid, VoxelTensor};

/// `-ln x` saturates here, as binary cross-entropy implementations usually do.
pub const NEG_LOG_CAP: f64 = 100.0;
pub const EMPTY_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub class_weighting: ClassWeighting,
    pub focal_weight: f64,
    pub lovasz_weight: f64,
    pub scal_geo_weight: f64,
    pub scal_sem_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            class_weighting: ClassWeighting::InverseFrequency,
            focal_weight: 1.0,
            lovasz_weight: 1.0,
            scal_geo_weight: 1.0,
            scal_sem_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.focal_weight, self.lovasz_weight, self.scal_geo_weight, self.scal_sem_weight];
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss gamma and weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub lovasz: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub total: f64,
}

/// Focal class weights. Inverse frequency is normalised to mean one over the
/// classes that occur; classes never seen keep weight one.
pub fn class_weights(grids: &[&OccupancyGrid], k: usize, scheme: ClassWeighting) -> Result<Vec<f64>> {
    let mut w = vec![1.0; k];
    if scheme == ClassWeighting::Uniform {
        return Ok(w);
    }
    let mut counts = vec![0u64; k];
    for g in grids {
        g.validate(k)?;
        for &l in g.labels() {
            counts[l as usize] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Ok(w);
    }
    let inv: Vec<f64> = present.iter().map(|&c| 1.0 / counts[c] as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    for (&c, v) in present.iter().zip(&inv) {
        w[c] = v / mean;
    }
    Ok(w)
}

fn check_labels(dims: Dims5, y: &OccupancyGrid) -> Result<()> {
    let [b, k, x, yy, z] = dims;
    if y.dims() != [b, x, yy, z] {
        return Err(Error::shape("loss labels", dims, y.dims()));
    }
    y.validate(k)
}

/// Capped `-ln x` and its derivative; the flag reports whether the cap was hit.
fn neg_log(x: f64) -> (f64, f64, bool) {
    let v = -x.ln();
    if v.is_nan() || v >= NEG_LOG_CAP {
        (NEG_LOG_CAP, 0.0, true)
    } else {
        (v, -1.0 / x, false)
    }
}

fn fold(sig: u64, piece: u64) -> u64 {
    splitmix64(sig ^ piece.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

// ---------------------------------------------------------------------------

pub struct Focal<'a> {
    pub labels: &'a OccupancyGrid,
    pub gamma: f64,
    pub alpha: &'a [f64],
}

impl Objective for Focal<'_> {
    fn name(&self) -> &'static str {
        "focal"
    }

    fn evaluate(&self, dims: Dims5, p: &[f64]) -> Result<Evaluation> {
        check_labels(dims, self.labels)?;
        let [b, k, ..] = dims;
        if self.alpha.len() != k {
            return Err(Error::shape("focal alpha", k, self.alpha.len()));
        }
        let vol = dims[2] * dims[3] * dims[4];
        let n = (b * vol) as f64;
        let g = self.gamma;
        let mut grad = vec![0.0; p.len()];
        let mut total = 0.0;
        let mut sig = 0;
        for bi in 0..b {
            for v in 0..vol {
                let y = self.labels.labels()[bi * vol + v] as usize;
                let off = (bi * k + y) * vol + v;
                let pt = p[off];
                let (nl, dnl, capped) = neg_log(pt);
                if capped {
                    sig = fold(sig, off as u64);
                }
                let q = 1.0 - pt;
                let mod_ = if g == 0.0 { 1.0 } else { q.powf(g) };
                let a = self.alpha[y];
                total += a * mod_ * nl;
                // d/dp [(1-p)^g * nl] = -g (1-p)^(g-1) nl + (1-p)^g dnl
                let dmod = if g == 0.0 || nl == 0.0 { 0.0 } else { -g * q.powf(g - 1.0) * nl };
                grad[off] = a * (dmod + mod_ * dnl) / n;
            }
        }
        Ok(Evaluation { value: total / n, grad, signature: sig })
    }
}

// ---------------------------------------------------------------------------

pub struct Lovasz<'a> {
    pub labels: &'a OccupancyGrid,
}

/// Gradient of the Jaccard loss extension with respect to sorted errors.
fn jaccard_weights(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg, mut prev) = (0.0, 0.0, 0.0);
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let j = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(j - prev);
        prev = j;
    }
    out
}

impl Objective for Lovasz<'_> {
    fn name(&self) -> &'static str {
        "lovasz"
    }

    fn evaluate(&self, dims: Dims5, p: &[f64]) -> Result<Evaluation> {
        check_labels(dims, self.labels)?;
        let [b, k, ..] = dims;
        let vol = dims[2] * dims[3] * dims[4];
        let labels = self.labels.labels();
        let n = b * vol;
        let mut grad = vec![0.0; p.len()];
        let mut sig = 0;
        let mut total = 0.0;
        let mut present = 0usize;
        let mut errors = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        for c in 0..k {
            if !labels.iter().any(|&l| l as usize == c) {
                continue;
            }
            present += 1;
            let off = |i: usize| (i / vol * k + c) * vol + i % vol;
            for (i, e) in errors.iter_mut().enumerate() {
                let fg = labels[i] as usize == c;
                let pc = p[off(i)];
                *e = if fg { 1.0 - pc } else { pc };
            }
            order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
            let fg_sorted: Vec<bool> = order.iter().map(|&i| labels[i] as usize == c).collect();
            let w = jaccard_weights(&fg_sorted);
            for (r, &i) in order.iter().enumerate() {
                total += errors[i] * w[r];
                sig = fold(sig, (c * n + i) as u64 ^ ((r as u64) << 32));
                grad[off(i)] = if fg_sorted[r] { -w[r] } else { w[r] };
            }
        }
        if present == 0 {
            return Ok(Evaluation { value: 0.0, grad, signature: 0 });
        }
        let scale = 1.0 / present as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(Evaluation { value: total * scale, grad, signature: sig })
    }
}

// ---------------------------------------------------------------------------

/// `-(ln P + ln R + ln S)` for soft scores `x` against binary targets `t`.
/// Adds `d/dx` into `dx` and returns the value; zero-denominator terms are skipped.
fn affinity(x: &[f64], t: &[bool], dx: &mut [f64], sig: &mut u64, tag: u64) -> f64 {
    let (mut sx, mut sxt, mut st, mut sneg, mut snegt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&xi, &ti) in x.iter().zip(t) {
        sx += xi;
        if ti {
            sxt += xi;
            st += 1.0;
        } else {
            sneg += 1.0;
            snegt += 1.0 - xi;
        }
    }
    let mut value = 0.0;
    let mut term = |ratio: f64, which: u64, dratio: &dyn Fn(usize) -> f64, dx: &mut [f64]| {
        let (v, d, capped) = neg_log(ratio);
        value += v;
        if capped {
            *sig = fold(*sig, tag * 4 + which);
            return;
        }
        for (i, g) in dx.iter_mut().enumerate() {
            *g += d * dratio(i);
        }
    };
    // Without positives the precision numerator is identically zero, so P is
    // skipped along with R.
    if sx > 0.0 && st > 0.0 {
        // P = sxt / sx
        term(sxt / sx, 1, &|i| ((t[i] as u8 as f64) * sx - sxt) / (sx * sx), dx);
    }
    if st > 0.0 {
        term(sxt / st, 2, &|i| (t[i] as u8 as f64) / st, dx);
    }
    if sneg > 0.0 {
        term(snegt / sneg, 3, &|i| if t[i] { 0.0 } else { -1.0 / sneg }, dx);
    }
    value
}

pub struct ScalGeo<'a> {
    pub labels: &'a OccupancyGrid,
}

impl Objective for ScalGeo<'_> {
    fn name(&self) -> &'static str {
        "scal_geo"
    }

    fn evaluate(&self, dims: Dims5, p: &[f64]) -> Result<Evaluation> {
        check_labels(dims, self.labels)?;
        let [_, k, ..] = dims;
        let vol = dims[2] * dims[3] * dims[4];
        let labels = self.labels.labels();
        let off = |i: usize| (i / vol * k + EMPTY_CLASS) * vol + i % vol;
        let x: Vec<f64> = (0..labels.len()).map(|i| 1.0 - p[off(i)]).collect();
        let t: Vec<bool> = labels.iter().map(|&l| l as usize != EMPTY_CLASS).collect();
        let mut dx = vec![0.0; x.len()];
        let mut sig = 0;
        let value = affinity(&x, &t, &mut dx, &mut sig, 0);
        let mut grad = vec![0.0; p.len()];
        for (i, d) in dx.into_iter().enumerate() {
            grad[off(i)] = -d;
        }
        Ok(Evaluation { value, grad, signature: sig })
    }
}

pub struct ScalSem<'a> {
    pub labels: &'a OccupancyGrid,
}

impl Objective for ScalSem<'_> {
    fn name(&self) -> &'static str {
        "scal_sem"
    }

    fn evaluate(&self, dims: Dims5, p: &[f64]) -> Result<Evaluation> {
        check_labels(dims, self.labels)?;
        let [_, k, ..] = dims;
        let vol = dims[2] * dims[3] * dims[4];
        let labels = self.labels.labels();
        let mut grad = vec![0.0; p.len()];
        let mut sig = 0;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut dx = vec![0.0; labels.len()];
        for c in (0..k).filter(|&c| c != EMPTY_CLASS) {
            let t: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            if !t.iter().any(|&v| v) {
                continue;
            }
            count += 1;
            let off = |i: usize| (i / vol * k + c) * vol + i % vol;
            let x: Vec<f64> = (0..labels.len()).map(|i| p[off(i)]).collect();
            dx.iter_mut().for_each(|d| *d = 0.0);
            total += affinity(&x, &t, &mut dx, &mut sig, c as u64);
            for (i, &d) in dx.iter().enumerate() {
                grad[off(i)] = d;
            }
        }
        if count == 0 {
            return Ok(Evaluation { value: 0.0, grad, signature: sig });
        }
        let s = 1.0 / count as f64;
        grad.iter_mut().for_each(|g| *g *= s);
        Ok(Evaluation { value: total * s, grad, signature: sig })
    }
}

// ---------------------------------------------------------------------------

fn eval_eager(obj: &dyn Objective, p: &VoxelTensor) -> Result<f64> {
    Ok(obj.evaluate(p.dims(), p.data())?.value)
}

pub fn focal_loss(p: &VoxelTensor, y: &OccupancyGrid, gamma: f64, alpha: &[f64]) -> Result<f64> {
    eval_eager(&Focal { labels: y, gamma, alpha }, p)
}

pub fn lovasz_softmax_loss(p: &VoxelTensor, y: &OccupancyGrid) -> Result<f64> {
    eval_eager(&Lovasz { labels: y }, p)
}

pub fn scal_geo_loss(p: &VoxelTensor, y: &OccupancyGrid) -> Result<f64> {
    eval_eager(&ScalGeo { labels: y }, p)
}

pub fn scal_sem_loss(p: &VoxelTensor, y: &OccupancyGrid) -> Result<f64> {
    eval_eager(&ScalSem { labels: y }, p)
}

/// Records the weighted sum of all four losses on `probs`.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    y: &OccupancyGrid,
    cfg: &LossConfig,
    alpha: &[f64],
) -> Result<(Var, LossBreakdown)> {
    let parts: [(&dyn Objective, f64); 4] = [
        (&Focal { labels: y, gamma: cfg.gamma, alpha }, cfg.focal_weight),
        (&Lovasz { labels: y }, cfg.lovasz_weight),
        (&ScalGeo { labels: y }, cfg.scal_geo_weight),
        (&ScalSem { labels: y }, cfg.scal_sem_weight),
    ];
    let mut values = [0.0; 4];
    let mut total: Option<Var> = None;
    for (i, (obj, w)) in parts.into_iter().enumerate() {
        let v = tape.objective(probs, obj)?;
        values[i] = tape.scalar(v)?;
        let v = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
    }
    let total = total.expect("four components");
    let breakdown = LossBreakdown {
        focal: values[0],
        lovasz: values[1],
        scal_geo: values[2],
        scal_sem: values[3],
        total: tape.scalar(total)?,
    };
    Ok((total, breakdown))
}

pub fn total_loss(p: &VoxelTensor, y: &OccupancyGrid, cfg: &LossConfig, alpha: &[f64]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let v = tape.constant(p);
    Ok(total_loss_on_tape(&mut tape, v, y, cfg, alpha)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Probabilities `[1, K, N, 1, 1]` from per-voxel rows.
    fn probs(rows: &[&[f64]]) -> VoxelTensor {
        let n = rows.len();
        let k = rows[0].len();
        VoxelTensor::from_fn([1, k, n, 1, 1], |[_, c, i, _, _]| rows[i][c])
    }

    fn labels(y: &[u8]) -> OccupancyGrid {
        OccupancyGrid::new([1, y.len(), 1, 1], y.to_vec()).unwrap()
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let p = probs(&[&[0.5, 0.5]]);
        let v = focal_loss(&p, &labels(&[1]), 0.0, &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_two_voxel_value() {
        let p = probs(&[&[0.1, 0.9], &[0.4, 0.6]]);
        let v = focal_loss(&p, &labels(&[1, 1]), 2.0, &[1.0, 1.0]).unwrap();
        let expect = 0.5 * (0.01 * -(0.9f64).ln() + 0.16 * -(0.6f64).ln());
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.041_392_8).abs() < 1e-7, "{v}");
    }

    #[test]
    fn focal_at_certainty_is_zero_without_nan() {
        let p = probs(&[&[0.0, 1.0]]);
        for g in [0.0, 0.5, 2.0] {
            let e = Focal { labels: &labels(&[1]), gamma: g, alpha: &[1.0, 1.0] }.evaluate(p.dims(), p.data()).unwrap();
            assert_eq!(e.value, 0.0);
            assert!(e.grad.iter().all(|v| v.is_finite()), "gamma {g}: {:?}", e.grad);
        }
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let p = probs(&[&[0.5, 0.5]]);
        assert!(matches!(focal_loss(&p, &labels(&[2]), 2.0, &[1.0, 1.0]), Err(Error::Validation(_))));
        assert!(lovasz_softmax_loss(&p, &labels(&[7])).is_err());
    }

    #[test]
    fn scal_geo_two_voxel_value() {
        // 1 - p_empty = [0.9, 0.2]
        let p = probs(&[&[0.1, 0.9], &[0.8, 0.2]]);
        let v = scal_geo_loss(&p, &labels(&[1, 0])).unwrap();
        let expect = -((0.9f64 / 1.1).ln() + 0.9f64.ln() + 0.8f64.ln());
        assert!((v - expect).abs() < 1e-14);
        assert!((v - 0.529_175).abs() < 1e-6, "{v}");
    }

    #[test]
    fn scal_geo_all_empty_keeps_specificity_only() {
        let p = probs(&[&[0.7, 0.3], &[0.6, 0.4]]);
        let v = scal_geo_loss(&p, &labels(&[0, 0])).unwrap();
        assert!((v - -(0.65f64).ln()).abs() < 1e-14);
        assert_eq!(scal_sem_loss(&p, &labels(&[0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn lovasz_extremes() {
        let y = labels(&[1, 0, 2, 1]);
        let hard = probs(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(lovasz_softmax_loss(&hard, &y).unwrap(), 0.0);
        let wrong = probs(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(lovasz_softmax_loss(&wrong, &labels(&[1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn hard_perfect_prediction_has_zero_total() {
        let y = labels(&[1, 0, 2, 1]);
        let hard = probs(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        let b = total_loss(&hard, &y, &LossConfig::default(), &[1.0; 3]).unwrap();
        assert_eq!(b, LossBreakdown::default());
    }

    #[test]
    fn inverse_frequency_weights() {
        let g = OccupancyGrid::new([1, 4, 1, 1], vec![0, 0, 0, 1]).unwrap();
        let w = class_weights(&[&g], 3, ClassWeighting::InverseFrequency).unwrap();
        // inverse counts 1/3 and 1, mean 2/3
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
        assert_eq!(w[2], 1.0);
        assert_eq!(class_weights(&[&g], 3, ClassWeighting::Uniform).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn breakdown_total_is_exact_sum() {
        let p = probs(&[&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], &[0.1, 0.1, 0.8]]);
        let b = total_loss(&p, &labels(&[1, 0, 2]), &LossConfig::default(), &[0.5, 1.0, 1.5]).unwrap();
        assert_eq!(b.total, b.focal + b.lovasz + b.scal_geo + b.scal_sem);
    }
}
