use std::io::Write;

use crate::error::Result;
use crate::losses::LossTerms;

use super::Evaluation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub range: f64,
    pub grad_norm: f64,
}

impl TraceRecord {
    pub(crate) fn from_eval(iteration: usize, e: &Evaluation) -> Self {
        let LossTerms { content, style, range } = e.terms;
        Self {
            iteration,
            total: e.loss,
            content,
            style,
            range,
            grad_norm: e.grad.dot(&e.grad).sqrt(),
        }
    }
}

/// Loss history of one run. `records` holds the state after outer
/// iterations 1, 1 + log_every, 1 + 2 log_every, ...
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub initial: TraceRecord,
    pub records: Vec<TraceRecord>,
    /// State at the returned point.
    pub last: TraceRecord,
    pub evaluations: usize,
    /// Steps undone because they produced a non-finite loss.
    pub rollbacks: usize,
}

impl RunTrace {
    pub(crate) fn start(initial: &Evaluation) -> Self {
        let rec = TraceRecord::from_eval(0, initial);
        Self {
            initial: rec,
            records: Vec::new(),
            last: rec,
            evaluations: 1,
            rollbacks: 0,
        }
    }

    pub(crate) fn finish_iteration(&mut self, iteration: usize, log_every: usize, e: &Evaluation) {
        self.last = TraceRecord::from_eval(iteration, e);
        if (iteration - 1) % log_every == 0 {
            self.records.push(self.last);
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iteration,total,content,style,range,grad_norm")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.iteration, r.total, r.content, r.style, r.range, r.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}
