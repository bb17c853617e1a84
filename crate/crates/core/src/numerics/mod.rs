//! Dense linear algebra, MLPs with reverse-mode gradients, Adam, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckReport, Parameterized};
pub use matrix::DenseMatrix;
pub use mlp::{mlp_backward, mlp_forward, Activation, ForwardCache, GradientTape, Layer, MlpParams};
pub use optim::{optimizer_step, OptimizerState};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Formats a real to 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds a real to the nearest value representable at 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().expect("formatted float parses")
}
