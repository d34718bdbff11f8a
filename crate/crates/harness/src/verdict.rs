//! Pass/fail checks on a finished pipeline run.

use std::fmt;

use taililc::policies::Source;

use crate::pipeline::{EvalSummary, Timings};

/// Students must at least halve the mass-feedforward test peak error.
pub const PEAK_REDUCTION: f64 = 0.5;
/// Students may be at most this factor worse than the expert on training
/// references.
pub const EXPERT_FACTOR: f64 = 10.0;
pub const ETA_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    match (num, den) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// Peak-error reduction on test members versus mass feedforward alone.
fn show(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "missing".into(), |x| if x.abs() < 1e-2 { format!("{x:.prec$e}") } else { format!("{x:.prec$}") })
}

pub fn peak_reduction(s: &EvalSummary) -> Verdict {
    let peak = |src: Source| s.mean_peak.get(&src).and_then(|v| v.test);
    let base = peak(Source::MassFf);
    let tail = ratio(peak(Source::TailMassFf), base);
    let nn = ratio(peak(Source::NnIlcMassFf), base);
    let ok = |r: Option<f64>| r.is_some_and(|r| r <= 1.0 - PEAK_REDUCTION);
    Verdict {
        name: "test peak error vs mass feedforward",
        pass: ok(tail) && ok(nn),
        detail: format!("ratio TAIL {}, NN-ILC {} (limit {:.2})", show(tail, 3), show(nn, 3), 1.0 - PEAK_REDUCTION),
    }
}

/// Training peak error relative to the converged expert.
pub fn expert_gap(s: &EvalSummary) -> Verdict {
    let peak = |src: Source| s.mean_peak.get(&src).and_then(|v| v.train);
    let base = peak(Source::Expert);
    let tail = ratio(peak(Source::TailMassFf), base);
    let nn = ratio(peak(Source::NnIlcMassFf), base);
    let ok = |r: Option<f64>| r.is_some_and(|r| r <= EXPERT_FACTOR);
    Verdict {
        name: "train peak error vs expert",
        pass: ok(tail) && ok(nn),
        detail: format!("ratio TAIL {}, NN-ILC {} (limit {EXPERT_FACTOR})", show(tail, 3), show(nn, 3)),
    }
}

pub fn eta_bound(s: &EvalSummary) -> Verdict {
    let terms = s.tail.as_ref().map(|e| [e.terms_train, e.terms_test]).unwrap_or_default();
    let present: Vec<_> = terms.iter().flatten().collect();
    let pass = !present.is_empty()
        && present.iter().all(|t| t.direct <= t.term_nl + t.term_mu + ETA_SLACK && t.term_nl >= 0.0 && t.term_mu >= 0.0);
    Verdict {
        name: "eta decomposition bound",
        pass,
        detail: present
            .iter()
            .map(|t| format!("{:.3e} <= {:.3e} + {:.3e}", t.direct, t.term_nl, t.term_mu))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

pub fn timing_order(t: &Timings) -> Verdict {
    let lt = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a < b);
    Verdict {
        name: "TAIL faster than NN-ILC",
        pass: lt(t.t_train_tail, t.t_train_nn_ilc) && lt(t.t_predict_full_tail, t.t_predict_full_nn_ilc),
        detail: format!(
            "train {} vs {} s, full prediction {} vs {} s",
            show(t.t_train_tail, 3),
            show(t.t_train_nn_ilc, 3),
            show(t.t_predict_full_tail, 3),
            show(t.t_predict_full_nn_ilc, 3)
        ),
    }
}

pub fn all(s: &EvalSummary, t: &Timings) -> Vec<Verdict> {
    vec![eta_bound(s), peak_reduction(s), expert_gap(s), timing_order(t)]
}
