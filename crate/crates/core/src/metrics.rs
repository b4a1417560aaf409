//! Occupancy evaluation: per-class IoU, mIoU, geometric IoU and height profiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EMPTY_CLASS;
use crate::tensor::{OccupancyGrid, VoxelTensor};

/// Confusion counts; merge across batches before taking ratios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub support: Vec<u64>,
    pub geo_tp: u64,
    pub geo_fp: u64,
    pub geo_fn: u64,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        let z = vec![0; num_classes];
        Self { num_classes, tp: z.clone(), fp: z.clone(), fn_: z.clone(), support: z, geo_tp: 0, geo_fp: 0, geo_fn: 0 }
    }

    pub fn add(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape("iou", pred.dims(), gt.dims()));
        }
        pred.validate(self.num_classes)?;
        gt.validate(self.num_classes)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            self.support[g] += 1;
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
            match (p != EMPTY_CLASS, g != EMPTY_CLASS) {
                (true, true) => self.geo_tp += 1,
                (true, false) => self.geo_fp += 1,
                (false, true) => self.geo_fn += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion merge", self.num_classes, other.num_classes));
        }
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
            (&mut self.support, &other.support),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.geo_tp += other.geo_tp;
        self.geo_fp += other.geo_fp;
        self.geo_fn += other.geo_fn;
        Ok(())
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let union = self.tp[c] + self.fp[c] + self.fn_[c];
        (union > 0).then(|| self.tp[c] as f64 / union as f64)
    }

    /// Mean of the defined IoUs, summed as exact fractions so the result is the
    /// correctly rounded mean (5/12 rather than 1/2 + 1/3 rounded twice).
    fn mean_iou(&self) -> Option<f64> {
        let fracs: Vec<(u128, u128)> = (1..self.num_classes)
            .filter_map(|c| {
                let union = self.tp[c] + self.fp[c] + self.fn_[c];
                (union > 0).then_some((self.tp[c] as u128, union as u128))
            })
            .collect();
        if fracs.is_empty() {
            return None;
        }
        let n = fracs.len() as u128;
        let exact = fracs.iter().try_fold((0u128, 1u128), |(a, b), &(c, d)| {
            let (num, den) = (a.checked_mul(d)?.checked_add(c.checked_mul(b)?)?, b.checked_mul(d)?);
            let g = gcd(num, den);
            Some((num / g, den / g))
        });
        Some(match exact.and_then(|(num, den)| Some((num, den.checked_mul(n)?))) {
            Some((num, den)) => ratio_f64(num, den),
            None => fracs.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / n as f64,
        })
    }

    pub fn report(&self) -> MetricsReport {
        let per_class_iou: Vec<Option<f64>> = (1..self.num_classes).map(|c| self.iou(c)).collect();
        let miou = self.mean_iou();
        let geo_union = self.geo_tp + self.geo_fp + self.geo_fn;
        let geo_iou = if geo_union == 0 { 1.0 } else { self.geo_tp as f64 / geo_union as f64 };
        MetricsReport { per_class_iou, miou, geo_iou, support: self.support.clone(), confusion: self.clone() }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// `num / den` after reducing; exact-input division whenever both fit in 53 bits.
fn ratio_f64(num: u128, den: u128) -> f64 {
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Classes `1..K`; `None` where neither grid contains the class.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when no class has a defined IoU.
    pub miou: Option<f64>,
    /// Two all-empty grids score 1.
    pub geo_iou: f64,
    pub support: Vec<u64>,
    #[serde(skip)]
    pub confusion: Confusion,
}

impl Default for Confusion {
    fn default() -> Self {
        Confusion::new(0)
    }
}

impl MetricsReport {
    /// One row per non-empty class: `name,tp,fp,fn,iou` (iou blank when undefined).
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let c = &self.confusion;
        let mut out = String::from("name,tp,fp,fn,iou\n");
        for k in 1..c.num_classes {
            let name = class_names.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("class_{k}"));
            let iou = self.per_class_iou[k - 1].map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{name},{},{},{},{iou}", c.tp[k], c.fp[k], c.fn_[k]);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "miou": self.miou, "geo_iou": self.geo_iou })
    }
}

pub fn iou_per_class(pred: &OccupancyGrid, gt: &OccupancyGrid, num_classes: usize) -> Result<MetricsReport> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.report())
}

/// Most probable class per voxel of `[B, K, X, Y, Z]` scores (first index wins ties).
pub fn argmax_labels(scores: &VoxelTensor) -> Result<OccupancyGrid> {
    let [b, k, x, y, z] = scores.dims();
    if k == 0 || k > 256 {
        return Err(Error::shape("argmax_labels", scores.dims(), "1..=256 classes"));
    }
    let vol = x * y * z;
    let d = scores.data();
    let mut labels = Vec::with_capacity(b * vol);
    for bi in 0..b {
        for v in 0..vol {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * vol + v] > d[(bi * k + best) * vol + v] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    OccupancyGrid::new([b, x, y, z], labels)
}

/// Per-class distribution of voxels over z indices; `None` for classes absent from `gt`.
pub fn height_histogram(gt: &OccupancyGrid, num_classes: usize) -> Result<Vec<Option<Vec<f64>>>> {
    gt.validate(num_classes)?;
    let z = gt.dims()[3];
    let mut counts = vec![vec![0u64; z]; num_classes];
    for (i, &l) in gt.labels().iter().enumerate() {
        counts[l as usize][i % z] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&n| n as f64 / total as f64).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(l: &[u8]) -> OccupancyGrid {
        OccupancyGrid::new([1, 2, 2, 1], l.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let r = iou_per_class(&grid(&[1, 2, 2, 2]), &grid(&[1, 1, 2, 0]), 3).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(1.0 / 3.0)]);
        assert_eq!(r.miou, Some(5.0 / 12.0));
        assert_eq!(r.geo_iou, 0.75);
    }

    #[test]
    fn identical_grids_score_one() {
        let g = grid(&[1, 0, 3, 3]);
        let r = iou_per_class(&g, &g, 4).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.geo_iou, 1.0);
    }

    #[test]
    fn undefined_everywhere() {
        let g = grid(&[0; 4]);
        let r = iou_per_class(&g, &g, 3).unwrap();
        assert_eq!(r.miou, None);
        assert_eq!(r.geo_iou, 1.0);
    }

    #[test]
    fn disjoint_class_scores_zero() {
        let r = iou_per_class(&grid(&[1, 1, 0, 0]), &grid(&[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0)]);
        assert_eq!(r.geo_iou, 0.0);
    }

    #[test]
    fn dims_mismatch_is_shape_error() {
        let a = OccupancyGrid::empty([1, 2, 2, 2]);
        assert!(matches!(iou_per_class(&a, &grid(&[0; 4]), 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn merged_counts_equal_joint_counts() {
        let (p1, g1) = (grid(&[1, 2, 2, 2]), grid(&[1, 1, 2, 0]));
        let (p2, g2) = (grid(&[0, 1, 1, 2]), grid(&[2, 1, 0, 2]));
        let mut a = Confusion::new(3);
        a.add(&p1, &g1).unwrap();
        let mut b = Confusion::new(3);
        b.add(&p2, &g2).unwrap();
        a.merge(&b).unwrap();
        let joint =
            iou_per_class(&OccupancyGrid::stack(&[&p1, &p2]).unwrap(), &OccupancyGrid::stack(&[&g1, &g2]).unwrap(), 3)
                .unwrap();
        assert_eq!(a.report(), joint);
    }

    #[test]
    fn csv_and_json() {
        let r = iou_per_class(&grid(&[1, 2, 2, 2]), &grid(&[1, 1, 2, 0]), 3).unwrap();
        let csv = r.to_csv(&["empty", "car"]);
        assert_eq!(csv, "name,tp,fp,fn,iou\ncar,1,0,1,0.500000\nclass_2,1,2,0,0.333333\n");
        assert_eq!(r.summary_json()["miou"], serde_json::json!(5.0 / 12.0));
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let s = VoxelTensor::new([1, 3, 2, 1, 1], vec![0.1, 0.5, 0.7, 0.5, 0.2, 0.0]).unwrap();
        // voxel 1 ties between classes 0 and 1
        assert_eq!(argmax_labels(&s).unwrap().labels(), &[1, 0]);
    }

    #[test]
    fn histogram_of_band() {
        let mut g = OccupancyGrid::empty([1, 2, 2, 16]);
        for x in 0..2 {
            for z in 8..10 {
                g.set([0, x, 1, z], 3);
            }
        }
        let h = height_histogram(&g, 4).unwrap();
        let h3 = h[3].as_ref().unwrap();
        assert!((h3[8] + h3[9] - 1.0).abs() < 1e-15 && h3[8] == 0.5);
        assert!(h[1].is_none());
        assert!(height_histogram(&OccupancyGrid::empty([1, 1, 1, 4]), 3).unwrap()[1..].iter().all(Option::is_none));
    }
}
