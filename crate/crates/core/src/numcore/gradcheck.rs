//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Tensors with more entries than this are subsampled.
    pub full_check_limit: usize,
    /// Coordinates drawn from each subsampled tensor.
    pub subsample: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            full_check_limit: 256,
            subsample: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the analytic gradients stored in `params` against central
/// differences of `loss_fn`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &ParamSet,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> f64,
{
    let base = loss_fn(params);
    let again = loss_fn(params);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic ({base} vs {again})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };

    for idx in 0..params.len() {
        let n = params.value(idx).len();
        let coords: Vec<usize> = if n > cfg.full_check_limit {
            sample(&mut rng, n, cfg.subsample.min(n)).into_vec()
        } else {
            (0..n).collect()
        };
        for c in coords {
            let orig = params.value(idx).data()[c];
            work.value_mut(idx).data_mut()[c] = orig + cfg.step;
            let plus = loss_fn(&work);
            work.value_mut(idx).data_mut()[c] = orig - cfg.step;
            let minus = loss_fn(&work);
            work.value_mut(idx).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = params.grad(idx).data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite comparison at {}[{c}]",
                    params.entries()[idx].name
                )));
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.entries()[idx].name.clone(), c));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
