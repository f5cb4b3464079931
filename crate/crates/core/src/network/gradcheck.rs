//! Central finite-difference gradient checking.
//!
//! Used by the test suites to compare hand-written backward passes against
//! numerical derivatives at 64-bit precision.

use super::Parameters;
use crate::tensor::FeatureMap;

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_error: f64,
    pub worst_entry: String,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.worst_error || self.worst_entry.is_empty() {
            self.worst_error = err;
            self.worst_entry = format!("{name}[{index}] analytic={analytic:e} numeric={numeric:e}");
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.worst_error > self.worst_error || self.worst_entry.is_empty() {
            self.worst_error = other.worst_error;
            self.worst_entry = other.worst_entry;
        }
    }
}

/// Deterministic spread of at most `max` indices over `0..len`.
pub fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * (len - 1) / (max - 1)).collect();
    out.dedup();
    out
}

fn set_entry<M: Parameters>(model: &mut M, tensor: usize, index: usize, value: f64) -> f64 {
    let mut tensors = model.named_tensors_mut();
    let slot = tensors[tensor]
        .1
        .iter_mut()
        .nth(index)
        .expect("index in range");
    let old = *slot;
    *slot = value;
    old
}

/// Compares `analytic` (same structure as `model`) against central
/// differences of `loss`, checking up to `max_per_tensor` entries of every
/// parameter tensor.
pub fn check_parameters<M, L>(
    model: &M,
    analytic: &M,
    loss: L,
    h: f64,
    max_per_tensor: usize,
) -> GradCheckReport
where
    M: Parameters + Clone,
    L: Fn(&M) -> f64,
{
    let mut probe = model.clone();
    let grads = analytic.named_tensors();
    let mut report = GradCheckReport::default();
    for (t, (name, g)) in grads.iter().enumerate() {
        let flat: Vec<f64> = g.iter().copied().collect();
        for i in sample_indices(flat.len(), max_per_tensor) {
            let orig = set_entry(&mut probe, t, i, 0.0);
            set_entry(&mut probe, t, i, orig + h);
            let plus = loss(&probe);
            set_entry(&mut probe, t, i, orig - h);
            let minus = loss(&probe);
            set_entry(&mut probe, t, i, orig);
            report.record(name, i, flat[i], (plus - minus) / (2.0 * h));
        }
    }
    report
}

/// Same as [`check_parameters`] for the gradient w.r.t. an input map.
pub fn check_input<L>(
    x: &FeatureMap,
    analytic: &FeatureMap,
    loss: L,
    h: f64,
    max_entries: usize,
) -> GradCheckReport
where
    L: Fn(&FeatureMap) -> f64,
{
    let mut probe = x.clone();
    let mut report = GradCheckReport::default();
    let len = x.len();
    for i in sample_indices(len, max_entries) {
        let orig = *probe.iter().nth(i).unwrap();
        *probe.iter_mut().nth(i).unwrap() = orig + h;
        let plus = loss(&probe);
        *probe.iter_mut().nth(i).unwrap() = orig - h;
        let minus = loss(&probe);
        *probe.iter_mut().nth(i).unwrap() = orig;
        report.record(
            "input",
            i,
            *analytic.iter().nth(i).unwrap(),
            (plus - minus) / (2.0 * h),
        );
    }
    report
}
