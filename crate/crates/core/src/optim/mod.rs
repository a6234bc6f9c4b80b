//! Pixel-space optimizers: fixed-step L-BFGS and Adam, with a loss trace.

mod adam;
mod lbfgs;
mod trace;

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;

pub use adam::adam_minimize;
pub use lbfgs::lbfgs_minimize;
pub use trace::{RunTrace, TraceRecord};

use crate::error::{Error, Result};
use crate::losses::LossTerms;

pub const TOLERANCE_GRAD: f64 = 1e-7;
pub const TOLERANCE_CHANGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Lbfgs,
    Adam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lbfgs => "lbfgs",
            Method::Adam => "adam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Method::Lbfgs),
            "adam" => Ok(Method::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub method: Method,
    /// Outer steps; each L-BFGS step runs up to `lbfgs_inner` updates.
    pub iterations: usize,
    pub lbfgs_history: usize,
    pub lbfgs_step: f64,
    pub lbfgs_inner: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            iterations: 500,
            lbfgs_history: 100,
            lbfgs_step: 1.0,
            lbfgs_inner: 20,
            adam_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 1,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.lbfgs_history == 0 || self.lbfgs_inner == 0 {
            return bad("lbfgs history and inner count must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if !(self.lbfgs_step > 0.0 && self.adam_lr > 0.0) {
            return bad("step sizes must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One objective evaluation: scalar loss, gradient and its breakdown.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Array1<f64>,
    pub terms: LossTerms,
}

impl Evaluation {
    pub fn new(loss: f64, grad: Array1<f64>) -> Self {
        Self {
            loss,
            grad,
            terms: LossTerms::default(),
        }
    }
}

/// Runs the optimizer selected by `cfg.method`.
pub fn minimize<F>(objective: F, x0: Array1<f64>, cfg: &OptConfig) -> Result<(Array1<f64>, RunTrace)>
where
    F: FnMut(&Array1<f64>) -> Result<Evaluation>,
{
    match cfg.method {
        Method::Lbfgs => lbfgs_minimize(objective, x0, cfg),
        Method::Adam => adam_minimize(objective, x0, cfg),
    }
}

fn max_abs(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
pub(crate) mod test_functions {
    use ndarray::{array, Array1};

    use super::Evaluation;
    use crate::error::Result;

    pub fn shifted_square(x: &Array1<f64>) -> Result<Evaluation> {
        Ok(Evaluation::new((x[0] - 3.0).powi(2), array![2.0 * (x[0] - 3.0)]))
    }

    pub fn rosenbrock(x: &Array1<f64>) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let loss = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let grad = array![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok(Evaluation::new(loss, grad))
    }

    /// `0.5 * sum d_i x_i^2` with eigenvalues spread over [1, cond].
    pub fn quadratic(cond: f64, n: usize) -> impl Fn(&Array1<f64>) -> Result<Evaluation> {
        let d = Array1::from_shape_fn(n, |i| cond.powf(i as f64 / (n - 1) as f64));
        move |x| {
            let g = &d * x;
            Ok(Evaluation::new(0.5 * x.dot(&g), g))
        }
    }
}
