use super::mlp::{GradientTape, MlpParams};
use crate::error::{Error, Result};

/// Adam moment buffers for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(params: &MlpParams, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let n = params.param_count();
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update. Refuses the step (leaving everything untouched) when
/// the tape holds a non-finite gradient.
pub fn optimizer_step(
    params: &mut MlpParams,
    tape: &GradientTape,
    state: &mut OptimizerState,
) -> Result<()> {
    let n = params.param_count();
    if tape.len() != n || state.first_moment.len() != n || !tape.matches(params) {
        return Err(Error::Shape(
            "optimizer state, tape and parameters disagree".into(),
        ));
    }
    if !tape.all_finite() {
        return Err(Error::NonFinite("gradient tape".into()));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bias1 = 1.0 - state.beta1.powf(t);
    let bias2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for (((p, g), m), v) in params
        .iter_params_mut()
        .zip(tape.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
