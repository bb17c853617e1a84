use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::MlpParams;
use crate::error::{Error, Result};

/// Probes whose analytic and numeric gradients are both below this are skipped.
pub const NEGLIGIBLE_GRADIENT: f64 = 1e-10;

/// Flat, indexable parameter set.
pub trait Parameterized: Clone {
    fn param_count(&self) -> usize;
    fn param(&self, index: usize) -> f64;
    fn set_param(&mut self, index: usize, value: f64);
}

impl Parameterized for MlpParams {
    fn param_count(&self) -> usize {
        MlpParams::param_count(self)
    }

    fn param(&self, index: usize) -> f64 {
        MlpParams::param(self, index)
    }

    fn set_param(&mut self, index: usize, value: f64) {
        MlpParams::set_param(self, index, value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Probes actually compared (negligible ones excluded).
    pub compared: usize,
    pub skipped: usize,
}

/// Compares the analytic gradient from `loss_fn` to central differences on
/// `probe_count` parameters drawn from `seed`. The error of a probe is
/// `|analytic - numeric| / |numeric|`.
///
/// `loss_fn` returns the loss value and the gradient over every parameter in
/// flat order.
pub fn grad_check<P, F>(
    loss_fn: F,
    params: &P,
    probe_count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    P: Parameterized,
    F: Fn(&P) -> Result<(f64, Vec<f64>)>,
{
    if probe_count == 0 {
        return Err(Error::config("grad_check needs at least one probe"));
    }
    if !(h > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {h}")));
    }
    let n = params.param_count();
    let (value, analytic) = loss_fn(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if analytic.len() != n {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for {n} parameters",
            analytic.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<usize> = if probe_count <= n {
        index::sample(&mut rng, n, probe_count).into_vec()
    } else {
        (0..probe_count).map(|_| rng.gen_range(0..n)).collect()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        compared: 0,
        skipped: 0,
    };
    let mut work = params.clone();
    for i in probes {
        let original = params.param(i);
        work.set_param(i, original + h);
        let (plus, _) = loss_fn(&work)?;
        work.set_param(i, original - h);
        let (minus, _) = loss_fn(&work)?;
        work.set_param(i, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        if a.abs() < NEGLIGIBLE_GRADIENT && numeric.abs() < NEGLIGIBLE_GRADIENT {
            report.skipped += 1;
            continue;
        }
        let rel = (a - numeric).abs() / numeric.abs().max(NEGLIGIBLE_GRADIENT);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.compared += 1;
    }
    Ok(report)
}
