//! Central finite-difference verification of the analytic gradients,
//! always in `f64`.

use super::losses::{example_losses, LossFlags};
use super::TrainError;
use crate::model::Parameters;
use crate::objectives::PretrainExample;

/// Perturbation used by the acceptance-level gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound every checked component must satisfy.
pub const FD_REL_TOL: f64 = 1e-4;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: Vec<usize>,
    pub n_checked: usize,
}

fn flat_to_multi(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (dim, &extent) in shape.iter().enumerate().rev() {
        idx[dim] = flat % extent;
        flat /= extent;
    }
    idx
}

/// Compares the analytic gradient of the joint loss against central finite
/// differences `(L(p+h) - L(p-h)) / 2h` with relative error
/// `|a - n| / max(|a| + |n|, 1e-6)`.
///
/// Every tensor is sampled; `per_tensor_limit` caps how many evenly spaced
/// components are checked per tensor (`None` checks all of them).
pub fn finite_difference_check(
    params: &Parameters<f64>,
    example: &PretrainExample,
    flags: LossFlags,
    beta: f64,
    step: f64,
    per_tensor_limit: Option<usize>,
) -> Result<GradCheckReport, TrainError> {
    let (_, grads) = example_losses(params, example, flags, beta, true)?;
    let grads = grads.expect("requested gradients");

    let mut probe = params.clone();
    let eval = |probe: &Parameters<f64>| -> Result<f64, TrainError> {
        let (parts, _) = example_losses(probe, example, flags, beta, false)?;
        Ok(parts.total(beta))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: Vec::new(),
        n_checked: 0,
    };
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let len = params.get(&name)?.len();
        let flats: Vec<usize> = match per_tensor_limit {
            Some(limit) if len > limit => (0..limit).map(|i| i * len / limit).collect(),
            _ => (0..len).collect(),
        };
        for flat in flats {
            let original = params.get(&name)?.as_slice().expect("owned tensors")[flat];
            let analytic = grads.get(&name)?.as_slice().expect("owned tensors")[flat];

            let slot =
                &mut probe.get_mut(&name)?.as_slice_mut().expect("owned tensors")[flat];
            *slot = original + step;
            let plus = eval(&probe)?;
            let slot =
                &mut probe.get_mut(&name)?.as_slice_mut().expect("owned tensors")[flat];
            *slot = original - step;
            let minus = eval(&probe)?;
            let slot =
                &mut probe.get_mut(&name)?.as_slice_mut().expect("owned tensors")[flat];
            *slot = original;

            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
                report.worst_index = flat_to_multi(params.get(&name)?.shape(), flat);
            }
        }
    }
    Ok(report)
}
