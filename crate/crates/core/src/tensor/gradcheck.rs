use super::Tensor;
use crate::error::{Error, Result};

/// Analytic vs central-difference gradient of one parameter element.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tolerance)
    }

    /// Worst relative error for each parameter tensor, in parameter order.
    pub fn per_param_max(&self, n_params: usize) -> Vec<f64> {
        let mut worst = vec![0.0; n_params];
        for e in &self.entries {
            worst[e.param] = f64::max(worst[e.param], e.rel_error);
        }
        worst
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !(e.rel_error < self.tolerance))
    }
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// for every element of every tensor in `params`.
///
/// `f` rebuilds its graph from the current values of `params` on each call.
/// Parameter values are restored afterwards; their accumulated gradients hold
/// the analytic gradient of one evaluation.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    let first = f()?.item();
    let second = f()?.item();
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }

    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + step;
            let plus = f()?.item();
            p.data_mut()[i] = orig - step;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][i];
            let rel_error = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            entries.push(GradCheckEntry { param: pi, index: i, analytic: a, numeric, rel_error });
        }
    }
    Ok(GradCheckReport { entries, tolerance })
}
