//! Central finite-difference verification of analytic gradients.
//!
//! The check perturbs sampled parameter coordinates by `±h`, re-evaluates the
//! loss, and compares `(f(θ+h) - f(θ-h)) / 2h` against the recorded-graph
//! gradient under a symmetric relative error. Parameters absent from the
//! analytic gradient map are compared against zero, which also verifies that
//! off-path parameters truly receive no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Compare `analytic` against central differences of `loss_fn` at the current
/// parameter values. Samples up to `samples_per_param` coordinates per
/// parameter (all of them for small tensors). `loss_fn` must be
/// deterministic in the parameters.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    analytic: &Gradients,
    loss_fn: F,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::numerics("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let numel = params.get(name).numel();
        let coords: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..numel)).collect()
        };
        for &i in &coords {
            let base = params.get(name).values()[i];
            work.get_mut(name).values_mut()[i] = base + h;
            let up = loss_fn(&work)?;
            work.get_mut(name).values_mut()[i] = base - h;
            let down = loss_fn(&work)?;
            work.get_mut(name).values_mut()[i] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numerics(format!(
                    "non-finite loss while perturbing '{name}'[{i}]"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic_value = analytic.get(name).map(|g| g.values()[i]).unwrap_or(0.0);
            // Cancellation in (up - down) bounds what the oracle can resolve:
            // discrepancies below the roundoff of the two loss evaluations
            // carry no signal and count as agreement.
            let noise_floor = up.abs().max(down.abs()).max(1.0) * 1e-14 / h;
            let diff = (analytic_value - numeric).abs();
            let rel = if diff <= noise_floor {
                0.0
            } else {
                diff / analytic_value.abs().max(numeric.abs()).max(1e-8)
            };
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = analytic_value;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
