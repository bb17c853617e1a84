//! Training objectives and the sampling-aware debias correction.
//!
//! Every loss here is a function of a single logit and returns its value
//! together with `∂L/∂z`, which the model code chains into parameter
//! gradients.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus};

/// Teacher target probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`
/// before entering any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

pub const ALPHA_MIN: f64 = 1.0;
pub const ALPHA_MAX: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub dl_dz: f64,
}

impl LossValue {
    pub const ZERO: LossValue = LossValue {
        value: 0.0,
        dl_dz: 0.0,
    };

    pub fn scaled(self, factor: f64) -> LossValue {
        LossValue {
            value: self.value * factor,
            dl_dz: self.dl_dz * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
    tau: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {tau}")));
        }
        Ok(Self { alpha, tau })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Which divergence compares teacher and student probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistillMetric {
    Ce,
    Mse,
}

/// Sampling parameters of one side (teacher or student) resolved for a
/// single task and traffic source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasParams {
    r_s: f64,
    r_plus: f64,
    p_x: f64,
    b_s: f64,
}

impl DebiasParams {
    pub const IDENTITY: DebiasParams = DebiasParams {
        r_s: 1.0,
        r_plus: 1.0,
        p_x: 1.0,
        b_s: 0.0,
    };

    pub fn new(r_s: f64, r_plus: f64, p_x: f64, b_s: f64) -> Result<Self> {
        if !(r_s >= 1.0 && r_s.is_finite()) {
            return Err(Error::config(format!("r_s must be >= 1, got {r_s}")));
        }
        if !(r_plus > 0.0 && r_plus <= 1.0) {
            return Err(Error::config(format!("r_plus must be in (0, 1], got {r_plus}")));
        }
        if !(p_x > 0.0 && p_x <= 1.0) {
            return Err(Error::config(format!("p_x must be in (0, 1], got {p_x}")));
        }
        if !(b_s >= 0.0 && b_s.is_finite()) {
            return Err(Error::config(format!("b_s must be >= 0, got {b_s}")));
        }
        Ok(Self {
            r_s,
            r_plus,
            p_x,
            b_s,
        })
    }

    pub fn r_s(&self) -> f64 {
        self.r_s
    }

    pub fn r_plus(&self) -> f64 {
        self.r_plus
    }

    pub fn p_x(&self) -> f64 {
        self.p_x
    }

    pub fn b_s(&self) -> f64 {
        self.b_s
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn ln_scale(&self) -> f64 {
        (self.r_s / self.p_x).ln()
    }

    /// `1 - r_plus + b_s`, the additive term inside the correction.
    fn offset(&self) -> f64 {
        1.0 - self.r_plus + self.b_s
    }

    /// Log-space pieces of the corrected probability at logit `z`.
    fn eval(&self, z: f64) -> DebiasEval {
        // ŷ = 1 / D,  D = 1 + A (e^{-z} + c),  A = r_s / p_x
        let ln_a = self.ln_scale();
        let c = self.offset();
        let ln_tail = if c > 0.0 {
            log_add_exp(-z, c.ln())
        } else {
            -z
        };
        let ln_d = log_add_exp(0.0, ln_a + ln_tail);
        let chain = if c > 0.0 { sigmoid(-(z + c.ln())) } else { 1.0 };
        DebiasEval {
            ln_y: -ln_d,
            ln_one_minus_y: ln_a + ln_tail - ln_d,
            chain,
        }
    }
}

struct DebiasEval {
    ln_y: f64,
    ln_one_minus_y: f64,
    /// `e^{-z} / (e^{-z} + c)`; `∂ŷ/∂z = ŷ (1 - ŷ) · chain`.
    chain: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy on a logit.
pub fn task_loss(z: f64, label: bool) -> LossValue {
    let y = if label { 1.0 } else { 0.0 };
    LossValue {
        value: softplus(z) - y * z,
        dl_dz: sigmoid(z) - y,
    }
}

/// Cross-entropy between a fixed teacher probability and the student's
/// sigmoid output. The gradient is `p_S - p_T`.
pub fn distill_ce(p_teacher: f64, z_student: f64) -> LossValue {
    let p = clamp_prob(p_teacher);
    LossValue {
        value: softplus(z_student) - p * z_student,
        dl_dz: sigmoid(z_student) - p,
    }
}

/// `τ² · KL(Bern(σ(z_T/τ)) ‖ Bern(σ(z_S/τ)))` with the teacher held constant.
pub fn distill_kl(z_teacher: f64, z_student: f64, tau: f64) -> LossValue {
    let u = z_teacher / tau;
    let s = z_student / tau;
    let p = sigmoid(u);
    let cross = softplus(s) - p * s;
    let entropy = softplus(u) - p * u;
    LossValue {
        value: tau * tau * (cross - entropy),
        dl_dz: tau * (sigmoid(s) - p),
    }
}

/// Half squared error between probabilities. Its gradient carries the
/// `p_S (1 - p_S)` factor that vanishes at saturation.
pub fn distill_mse(p_teacher: f64, z_student: f64) -> LossValue {
    let ps = sigmoid(z_student);
    let diff = ps - p_teacher;
    LossValue {
        value: 0.5 * diff * diff,
        dl_dz: diff * ps * (1.0 - ps),
    }
}

/// Maps a raw logit learned on sampled data to a corrected probability:
/// `1 / (1 + (r_s / p_x)(e^{-z} + 1 - r_plus + b_s))`.
pub fn debias(z: f64, d: &DebiasParams) -> f64 {
    if d.is_identity() {
        sigmoid(z)
    } else {
        d.eval(z).ln_y.exp()
    }
}

/// Projects the teacher's raw logit through the *student-side* correction.
pub fn teacher_rebias(t1: f64, student: &DebiasParams) -> f64 {
    debias(t1, student)
}

/// Distillation loss between a corrected teacher target and the student's
/// corrected output `debias(s1, student)`.
///
/// With `chain_through_debias` the gradient is the exact derivative with
/// respect to `s1`. Without it the correction is treated as a post-hoc
/// calibration and the gradient is taken as if the output were `σ(s1)`.
pub fn debiased_distill(
    target: f64,
    s1: f64,
    student: &DebiasParams,
    metric: DistillMetric,
    chain_through_debias: bool,
) -> LossValue {
    if student.is_identity() {
        return match metric {
            DistillMetric::Ce => distill_ce(target, s1),
            DistillMetric::Mse => distill_mse(target, s1),
        };
    }
    let e = student.eval(s1);
    let s2 = e.ln_y.exp();
    let chain = if chain_through_debias { e.chain } else { 1.0 };
    match metric {
        DistillMetric::Ce => {
            let t = clamp_prob(target);
            LossValue {
                value: -t * e.ln_y - (1.0 - t) * e.ln_one_minus_y,
                dl_dz: chain * (s2 - t),
            }
        }
        DistillMetric::Mse => {
            let diff = s2 - target;
            let one_minus = e.ln_one_minus_y.exp();
            LossValue {
                value: 0.5 * diff * diff,
                dl_dz: diff * s2 * one_minus * chain,
            }
        }
    }
}

/// Distillation between `T₂' = f_S(T₁)` and `S₂ = f_S(S₁)`.
pub fn kd_debias_loss(t1: f64, s1_aux: f64, student: &DebiasParams, metric: DistillMetric) -> LossValue {
    debiased_distill(teacher_rebias(t1, student), s1_aux, student, metric, true)
}

/// `L = L_task + α · L_distill`, with no normalisation of the weights.
pub fn combined_loss(task: LossValue, distill: LossValue, weights: &LossWeights) -> LossValue {
    LossValue {
        value: task.value + weights.alpha * distill.value,
        dl_dz: task.dl_dz + weights.alpha * distill.dl_dz,
    }
}

/// Distillation weight that brings the two loss magnitudes to the same
/// order: `mean|task| / max(mean|distill|, ε)`, clamped to `[1, 1000]`.
pub fn align_alpha(task_losses: &[f64], distill_losses: &[f64]) -> Result<f64> {
    if task_losses.is_empty() || distill_losses.is_empty() {
        return Err(Error::config("align_alpha needs non-empty loss windows"));
    }
    let mean_abs = |xs: &[f64]| xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64;
    let task = mean_abs(task_losses);
    let distill = mean_abs(distill_losses).max(1e-12);
    let alpha = task / distill;
    if !alpha.is_finite() {
        return Err(Error::NonFinite("align_alpha ratio".into()));
    }
    Ok(alpha.clamp(ALPHA_MIN, ALPHA_MAX))
}
