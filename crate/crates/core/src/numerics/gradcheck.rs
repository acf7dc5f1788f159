//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        GradCheckConfig {
            rel_tol,
            abs_tol,
            step: FD_STEP,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, coords: usize, seed: u64) -> Self {
        self.max_coords = Some(coords);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, r| m.max(r.max_rel_error))
    }
}

/// Compare `analytic[i]` against central differences of the scalar function
/// `f` at `inputs`. An element passes when
/// `|analytic - numeric| <= max(rel_tol * max(|analytic|, |numeric|), abs_tol)`.
pub fn grad_check<F>(
    mut f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(Error::config("grad_check: one analytic gradient per input required"));
    }
    let base = f(inputs);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            location: "grad_check: function value at probe point".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        inputs[idx].check_same_shape(grad, "grad_check")?;
        if let Some(pos) = grad.first_non_finite() {
            return Err(Error::NonFinite {
                location: format!("grad_check: analytic gradient of input {idx} at element {pos}"),
            });
        }
        let n = inputs[idx].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut rep = InputReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            checked: coords.len(),
            passed: true,
        };
        for &i in &coords {
            let orig = work[idx].data()[i];
            work[idx].data_mut()[i] = orig + cfg.step;
            let plus = f(&work);
            work[idx].data_mut()[i] = orig - cfg.step;
            let minus = f(&work);
            work[idx].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("grad_check: perturbed value of input {idx} at element {i}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let abs_err = (a - numeric).abs();
            let mag = a.abs().max(numeric.abs());
            let rel_err = if mag > 0.0 { abs_err / mag } else { 0.0 };
            if abs_err > (cfg.rel_tol * mag).max(cfg.abs_tol) {
                rep.passed = false;
            }
            if abs_err > rep.max_abs_error {
                rep.max_abs_error = abs_err;
                rep.worst_index = i;
            }
            // relative error only counts where the absolute floor does not apply
            if abs_err > cfg.abs_tol {
                rep.max_rel_error = rep.max_rel_error.max(rel_err);
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport { inputs: reports })
}
