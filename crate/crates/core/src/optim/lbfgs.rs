use std::collections::VecDeque;

use ndarray::Array1;

use super::{max_abs, Evaluation, OptConfig, RunTrace, TOLERANCE_CHANGE, TOLERANCE_GRAD};
use crate::error::{Error, Result};

/// Consecutive rolled-back steps tolerated before giving up.
const MAX_ROLLBACKS: usize = 16;

struct History {
    pairs: VecDeque<(Array1<f64>, Array1<f64>, f64)>,
    capacity: usize,
    h_diag: f64,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(capacity.min(128)),
            capacity,
            h_diag: 1.0,
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
        self.h_diag = 1.0;
    }

    fn push(&mut self, s: Array1<f64>, y: Array1<f64>) {
        let ys = y.dot(&s);
        if ys <= 1e-10 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.h_diag = ys / y.dot(&y);
        self.pairs.push_back((s, y, 1.0 / ys));
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &Array1<f64>) -> Array1<f64> {
        let mut q = -g;
        let mut alphas = vec![0.0; self.pairs.len()];
        for (i, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            alphas[i] = rho * s.dot(&q);
            q.scaled_add(-alphas[i], y);
        }
        q *= self.h_diag;
        for (i, (s, y, rho)) in self.pairs.iter().enumerate() {
            let beta = rho * y.dot(&q);
            q.scaled_add(alphas[i] - beta, s);
        }
        q
    }
}

/// Outcome of trying one update.
enum Trial {
    Accepted(Evaluation),
    Rejected,
}

fn try_point<F>(objective: &mut F, x: &Array1<f64>) -> Result<Trial>
where
    F: FnMut(&Array1<f64>) -> Result<Evaluation>,
{
    if x.iter().any(|v| !v.is_finite()) {
        return Ok(Trial::Rejected);
    }
    match objective(x) {
        Ok(e) if e.loss.is_finite() && e.grad.iter().all(|g| g.is_finite()) => Ok(Trial::Accepted(e)),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(Trial::Rejected),
        Err(e) => Err(e),
    }
}

/// Fixed-step L-BFGS without line search. Each outer iteration runs up to
/// `lbfgs_inner` updates; curvature state carries across iterations. A
/// step that yields a non-finite loss is undone, the history dropped and
/// the step size halved for the rest of the run.
pub fn lbfgs_minimize<F>(mut objective: F, x0: Array1<f64>, cfg: &OptConfig) -> Result<(Array1<f64>, RunTrace)>
where
    F: FnMut(&Array1<f64>) -> Result<Evaluation>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point"));
    }
    let mut x = x0;
    let mut eval = match try_point(&mut objective, &x)? {
        Trial::Accepted(e) => e,
        Trial::Rejected => return Err(Error::NonFinite("initial loss")),
    };
    let mut trace = RunTrace::start(&eval);
    let mut history = History::new(cfg.lbfgs_history);
    // Previous accepted step `t * d` and the gradient it started from.
    let mut last_step: Option<(Array1<f64>, Array1<f64>)> = None;
    let mut fresh = true;
    let mut failures = 0;
    let mut lr = cfg.lbfgs_step;

    for outer in 1..=cfg.iterations {
        if max_abs(&eval.grad) > TOLERANCE_GRAD {
            for _ in 0..cfg.lbfgs_inner {
                if let Some((s, g_prev)) = last_step.take() {
                    history.push(s, &eval.grad - &g_prev);
                }
                let d = history.direction(&eval.grad);
                let t = if fresh {
                    (1.0 / eval.grad.iter().map(|g| g.abs()).sum::<f64>()).min(1.0) * lr
                } else {
                    lr
                };
                if eval.grad.dot(&d) > -TOLERANCE_CHANGE {
                    break;
                }
                let step = d * t;
                let candidate = &x + &step;
                match try_point(&mut objective, &candidate)? {
                    Trial::Accepted(next) => {
                        trace.evaluations += 1;
                        failures = 0;
                        fresh = false;
                        let change = (next.loss - eval.loss).abs();
                        let tiny_step = max_abs(&step) <= TOLERANCE_CHANGE;
                        x = candidate;
                        last_step = Some((step, std::mem::replace(&mut eval, next).grad));
                        if max_abs(&eval.grad) <= TOLERANCE_GRAD || tiny_step || change < TOLERANCE_CHANGE {
                            break;
                        }
                    }
                    Trial::Rejected => {
                        trace.evaluations += 1;
                        trace.rollbacks += 1;
                        failures += 1;
                        if failures > MAX_ROLLBACKS {
                            return Err(Error::Diverged {
                                iteration: outer,
                                reason: format!("{failures} consecutive non-finite steps"),
                            });
                        }
                        history.clear();
                        lr *= 0.5;
                        last_step = None;
                        fresh = true;
                        break;
                    }
                }
            }
        }
        trace.finish_iteration(outer, cfg.log_every, &eval);
    }
    Ok((x, trace))
}
