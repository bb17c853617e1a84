//! Self-checks run by the command line: finite-difference gradient checks
//! over every loss, and a Monte Carlo calibration check of the debias
//! correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::{apply_sampling, Generator, GeneratorConfig, EventStream, SamplingConfig, DEFAULT_TASK};
use crate::error::{Error, Result};
use crate::losses::{
    debias, distill_ce, distill_kl, distill_mse, kd_debias_loss, task_loss, DebiasParams, DistillMetric, LossValue,
};
use crate::numerics::{grad_check, logit, mlp_backward, mlp_forward, sigmoid, Activation, MlpParams};

pub const DEFAULT_PROBES: usize = 32;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

/// Sample size at which the calibration threshold is 0.01.
pub const CALIBRATION_REFERENCE_SAMPLES: usize = 1_000_000;
pub const CALIBRATION_TOLERANCE: f64 = 0.01;
/// Below this many samples the calibration check warns about power.
pub const LOW_POWER_SAMPLES: usize = 10_000;

const GRADCHECK_INPUT_DIM: usize = 6;
const GRADCHECK_BATCH: usize = 8;
const CALIBRATION_CHUNK: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: String,
    pub worst_error: f64,
    pub compared: usize,
    pub skipped: usize,
    pub passed: bool,
}

type PointLoss = Box<dyn Fn(f64, f64, bool) -> LossValue>;

/// Every loss checked by [`gradcheck_suite`], as `(name, loss(teacher_logit,
/// student_logit, label))`.
fn suite_losses() -> Result<Vec<(String, PointLoss)>> {
    let student = DebiasParams::new(5.0, 1.0, 1.0, 0.0)?;
    let mut out: Vec<(String, PointLoss)> = vec![
        ("task".into(), Box::new(|_, z, y| task_loss(z, y))),
        ("distill_ce".into(), Box::new(|t, z, _| distill_ce(sigmoid(t), z))),
    ];
    for tau in [0.5, 1.0, 2.0] {
        out.push((format!("distill_kl_tau{tau}"), Box::new(move |t, z, _| distill_kl(t, z, tau))));
    }
    out.push(("distill_mse".into(), Box::new(|t, z, _| distill_mse(sigmoid(t), z))));
    for (name, metric) in [("kd_debias_ce", DistillMetric::Ce), ("kd_debias_mse", DistillMetric::Mse)] {
        out.push((
            name.into(),
            Box::new(move |t, z, _| kd_debias_loss(t, z, &student, metric)),
        ));
    }
    Ok(out)
}

/// Gradient check of every loss composed with a random ReLU network, each
/// with `probes` central-difference probes. Each entry reports the worst
/// relative error for one loss.
pub fn gradcheck_suite(probes: usize, tolerance: f64, seed: u64) -> Result<Vec<LossCheck>> {
    if probes == 0 {
        return Err(Error::config("gradcheck needs at least one probe"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::config(format!("tolerance must be positive, got {tolerance}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (i, (name, loss)) in suite_losses()?.into_iter().enumerate() {
        let net = MlpParams::init(
            &[GRADCHECK_INPUT_DIM, 10, 8, 1],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let batch: Vec<(Vec<f64>, f64, bool)> = (0..GRADCHECK_BATCH)
            .map(|_| {
                let x = (0..GRADCHECK_INPUT_DIM).map(|_| rng.sample(StandardNormal)).collect();
                let t: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
                (x, t, rng.gen_bool(0.5))
            })
            .collect();
        let objective = |p: &MlpParams| -> Result<(f64, Vec<f64>)> {
            let mut total = 0.0;
            let mut grad = vec![0.0; p.param_count()];
            for (x, t, y) in &batch {
                let (z, cache) = mlp_forward(p, x)?;
                let l = loss(*t, z, *y);
                total += l.value;
                for (g, d) in grad.iter_mut().zip(mlp_backward(p, &cache, l.dl_dz)?.iter()) {
                    *g += d;
                }
            }
            Ok((total, grad))
        };
        let report = grad_check(objective, &net, probes, FD_STEP, seed.wrapping_add(i as u64))?;
        checks.push(LossCheck {
            loss: name,
            worst_error: report.max_relative_error,
            compared: report.compared,
            skipped: report.skipped,
            passed: report.max_relative_error <= tolerance,
        });
    }
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCheck {
    pub r_s: f64,
    pub samples: usize,
    /// Mean absolute error between the debiased fit and the true posterior
    /// over the unsampled population.
    pub mae: f64,
    pub threshold: f64,
    pub low_power: bool,
    pub passed: bool,
}

/// `0.01 · max(1, sqrt(10⁶ / n))`: the tolerance grows like the standard
/// error when fewer samples are drawn.
pub fn calibration_threshold(samples: usize) -> f64 {
    let ratio = CALIBRATION_REFERENCE_SAMPLES as f64 / samples.max(1) as f64;
    CALIBRATION_TOLERANCE * ratio.sqrt().max(1.0)
}

/// Two-parameter logistic regression `P(y) = σ(a + b·z)` by Newton steps.
fn fit_logistic(z: &[f64], y: &[bool]) -> Result<(f64, f64)> {
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..50 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(a + b * zi);
            let r = f64::from(u8::from(yi)) - p;
            let w = p * (1.0 - p);
            g0 += r;
            g1 += r * zi;
            h00 += w;
            h01 += w * zi;
            h11 += w * zi * zi;
        }
        let det = h00 * h11 - h01 * h01;
        if !(det.abs() > 1e-300) {
            return Err(Error::NonFinite("logistic fit has a singular Hessian".into()));
        }
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        a += da;
        b += db;
        if da.abs().max(db.abs()) < 1e-12 {
            break;
        }
    }
    if a.is_finite() && b.is_finite() {
        Ok((a, b))
    } else {
        Err(Error::NonFinite("logistic fit diverged".into()))
    }
}

/// Draws `samples` events with a known posterior, keeps one negative per
/// `r_s`, fits the biased posterior on the kept events, debiases the fit
/// and measures its error against the true posterior on every event.
pub fn calibrate(r_s: f64, samples: usize, seed: u64) -> Result<CalibrationCheck> {
    if samples < 2 {
        return Err(Error::config("calibration needs at least 2 samples"));
    }
    let mut cfg = GeneratorConfig::seeded(4, 2.0, seed);
    cfg.positive_rate_target = 0.3;
    let generator = Generator::new(cfg)?;
    let sampling = SamplingConfig::negative_downsampling(r_s, &["organic"]);
    let params = sampling.debias_params(DEFAULT_TASK, "organic")?;

    let mut population = Vec::with_capacity(samples);
    let (mut kept_z, mut kept_y) = (Vec::new(), Vec::new());
    let mut step = 0;
    while population.len() < samples {
        let n = CALIBRATION_CHUNK.min(samples - population.len());
        let events = generator.generate(EventStream::Train, step, n)?;
        for e in &apply_sampling(&events, &sampling, DEFAULT_TASK, seed)?.kept {
            kept_z.push(logit(e.true_posterior));
            kept_y.push(e.label);
        }
        population.extend(events.iter().map(|e| e.true_posterior));
        step += 1;
    }
    let (a, b) = fit_logistic(&kept_z, &kept_y)?;
    let mae = population
        .iter()
        .map(|&p| (debias(a + b * logit(p), &params) - p).abs())
        .sum::<f64>()
        / samples as f64;
    let threshold = calibration_threshold(samples);
    Ok(CalibrationCheck {
        r_s,
        samples,
        mae,
        threshold,
        low_power: samples < LOW_POWER_SAMPLES,
        passed: mae <= threshold,
    })
}
