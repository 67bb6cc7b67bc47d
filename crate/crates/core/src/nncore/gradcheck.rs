//! Central-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nncore::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries sampled per parameter (all when the entry is smaller).
    pub samples_per_entry: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_entry: 12,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss(params, want_grad)` must return the loss and, when `want_grad` is
/// set, accumulate the gradient into `params` (gradients are zeroed first).
pub fn check_gradients<F>(
    params: &mut ParamStore<f64>,
    mut loss: F,
    cfg: GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    params.zero_grads();
    loss(params, true)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(n, e)| (n.to_string(), e.grad.clone()))
        .collect();
    params.zero_grads();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, grad) in analytic {
        let len = grad.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_entry {
            (0..len).collect()
        } else {
            sample(rng, len, cfg.samples_per_entry).into_vec()
        };
        for i in picks {
            let orig = params.get(&name)?.value[i];
            params.get_mut(&name)?.value[i] = orig + cfg.step;
            let up = loss(params, false)?;
            params.get_mut(&name)?.value[i] = orig - cfg.step;
            let down = loss(params, false)?;
            params.get_mut(&name)?.value[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            if !numeric.is_finite() || !grad[i].is_finite() {
                return Err(Error::Training(format!("non-finite gradient at {name}[{i}]")));
            }
            let denom = grad[i].abs().max(numeric.abs()).max(cfg.floor);
            let rel = (grad[i] - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", grad[i]);
            }
        }
    }
    Ok(report)
}
