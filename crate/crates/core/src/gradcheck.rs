//! Central finite-difference verification of tape gradients.
//!
//! Every differentiable input of a check lives in a [`ModuleParams`] so a single
//! perturbation loop covers data tensors and weights alike. Probes whose `x +- h`
//! evaluation lands on a different smooth piece than the base point (a relu
//! flips, a sort order changes) are retried with smaller steps and counted as
//! skipped if every step crosses.

use crate::error::{Error, Result};
use crate::params::ModuleParams;
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-5;
/// A probe whose `x +- h` crosses a kink is retried with `h / 3`, `h / 9`, `h / 27`.
/// Steps much below that are dominated by rounding in losses of order 10.
pub const REFINEMENTS: usize = 4;
pub const REFINE_FACTOR: f64 = 3.0;
/// Largest tolerated share of probes skipped for crossing a kink at every step.
pub const MAX_SKIP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Negative control: distort one analytic gradient entry before comparing.
    pub corrupt: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: FD_STEP, tolerance: REL_TOL, max_coords_per_tensor: None, corrupt: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.max_rel_err < self.tolerance
            && (self.skipped as f64) <= MAX_SKIP_FRACTION * (self.checked + self.skipped) as f64
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(build: &F, inputs: &ModuleParams) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ModuleParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, inputs)?;
    Ok((tape.scalar(loss)?, tape.signature()))
}

/// Compares the tape gradient of `build` against central differences on every
/// tensor in `inputs`.
pub fn check<F>(name: &str, inputs: &ModuleParams, build: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ModuleParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, inputs)?;
    let base_sig = tape.signature();
    tape.backward(loss)?;
    let mut analytic = inputs.clone();
    analytic.zero_grads();
    tape.accumulate_param_grads(&mut analytic)?;
    if opts.corrupt {
        let first =
            analytic.iter_mut().next().ok_or_else(|| Error::Validation("gradient check without inputs".into()))?.1;
        first.grad[0] = first.grad[0] * 1.5 + 1e-3;
    }

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance: opts.tolerance,
    };
    let mut probe = inputs.clone();
    let names: Vec<String> = inputs.names().map(str::to_string).collect();
    for tensor in &names {
        let n = inputs.get(tensor)?.len();
        let stride = match opts.max_coords_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.get(tensor)?.grad.clone();
        for idx in (0..n).step_by(stride) {
            let orig = inputs.get(tensor)?.values[idx];
            let mut found = None;
            for h in (0..REFINEMENTS).map(|i| opts.step / REFINE_FACTOR.powi(i as i32)) {
                probe.get_mut(tensor)?.values[idx] = orig + h;
                let (fp, sp) = evaluate(&build, &probe)?;
                probe.get_mut(tensor)?.values[idx] = orig - h;
                let (fm, sm) = evaluate(&build, &probe)?;
                probe.get_mut(tensor)?.values[idx] = orig;
                if sp == base_sig && sm == base_sig {
                    found = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = found else {
                report.skipped += 1;
                continue;
            };
            let err = rel_err(grad[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some(Worst { tensor: tensor.clone(), index: idx, analytic: grad[idx], numeric });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;

    fn inputs() -> ModuleParams {
        let mut p = ModuleParams::new(0);
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        p.insert("x", Param::new(vec![1, 1, 2, 2, 3], vals).unwrap()).unwrap();
        p
    }

    fn sigmoid_sum(t: &mut Tape, p: &ModuleParams) -> Result<Var> {
        let x = t.param_voxel(p, "x")?;
        let s = t.sigmoid(x);
        let s2 = t.sigmoid(s);
        Ok(t.sum(s2))
    }

    #[test]
    fn smooth_composite_passes() {
        let r = check("sigmoid", &inputs(), sigmoid_sum, &CheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let opts = CheckOptions { corrupt: true, ..Default::default() };
        let r = check("sigmoid", &inputs(), sigmoid_sum, &opts).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.unwrap().index, 0);
    }

    #[test]
    fn relu_kink_crossings_are_skipped() {
        let mut p = ModuleParams::new(0);
        p.insert("x", Param::new(vec![1, 1, 1, 1, 3], vec![0.5, 3e-7, -0.2]).unwrap()).unwrap();
        let r = check(
            "relu",
            &p,
            |t, p| {
                let x = t.param_voxel(p, "x")?;
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn near_kink_resolves_with_smaller_step() {
        let mut p = ModuleParams::new(0);
        p.insert("x", Param::new(vec![1, 1, 1, 1, 2], vec![3e-5, -0.2]).unwrap()).unwrap();
        let r = check(
            "relu",
            &p,
            |t, p| {
                let x = t.param_voxel(p, "x")?;
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (2, 0));
    }
}
