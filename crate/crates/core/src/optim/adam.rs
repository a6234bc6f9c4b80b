use ndarray::{Array1, Zip};

use super::{Evaluation, OptConfig, RunTrace};
use crate::error::{Error, Result};

fn checked(iteration: usize, e: Evaluation) -> Result<Evaluation> {
    if !e.loss.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            reason: format!("non-finite loss {} under adam", e.loss),
        });
    }
    Ok(e)
}

/// Adam with bias-corrected moments; one update per iteration.
pub fn adam_minimize<F>(mut objective: F, x0: Array1<f64>, cfg: &OptConfig) -> Result<(Array1<f64>, RunTrace)>
where
    F: FnMut(&Array1<f64>) -> Result<Evaluation>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point"));
    }
    let mut x = x0;
    let mut eval = checked(0, objective(&x)?)?;
    let mut trace = RunTrace::start(&eval);
    let mut m = Array1::<f64>::zeros(x.len());
    let mut v = Array1::<f64>::zeros(x.len());
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for k in 1..=cfg.iterations {
        let c1 = 1.0 - b1.powi(k as i32);
        let c2 = 1.0 - b2.powi(k as i32);
        Zip::from(&mut x)
            .and(&mut m)
            .and(&mut v)
            .and(&eval.grad)
            .for_each(|x, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= cfg.adam_lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        eval = checked(k, objective(&x)?)?;
        trace.evaluations += 1;
        trace.finish_iteration(k, cfg.log_every, &eval);
    }
    Ok((x, trace))
}
