//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::nn::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor `|a - n| / max(|a|, |n|, 1e-8)`, with `|.|` the
    /// Euclidean norm over the tensor's entries.
    pub max_rel_error: f64,
    /// Tensor where `max_rel_error` occurred.
    pub worst_tensor: Option<String>,
    /// Largest entrywise relative error with the same `1e-8` floor. Entries
    /// with gradients below about `1e-7` are dominated by rounding in the
    /// finite differences, so this is diagnostic only.
    pub max_entry_rel_error: f64,
    /// Parameter name and flat index of `max_entry_rel_error`.
    pub worst_entry: Option<(String, usize)>,
    /// Analytic and numeric derivatives at `worst_entry`.
    pub worst_entry_values: (f64, f64),
    pub checked: usize,
}

fn rel_error(a: f64, n: f64, diff: f64) -> f64 {
    diff / a.max(n).max(1e-8)
}

/// Compares the tape gradient of `loss_fn` with central differences of step
/// `h` for every scalar in the store. `loss_fn` must build a scalar loss.
pub fn gradient_check<F>(store: &ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: None,
        max_entry_rel_error: 0.0,
        worst_entry: None,
        worst_entry_values: (0.0, 0.0),
        checked: 0,
    };
    for id in store.ids() {
        let (mut aa, mut nn, mut dd) = (0.0, 0.0, 0.0);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            aa += a * a;
            nn += numeric * numeric;
            dd += (a - numeric) * (a - numeric);
            let rel = rel_error(a.abs(), numeric.abs(), (a - numeric).abs());
            report.checked += 1;
            if rel > report.max_entry_rel_error || report.worst_entry.is_none() {
                report.max_entry_rel_error = rel;
                report.worst_entry = Some((store.name(id).to_string(), k));
                report.worst_entry_values = (a, numeric);
            }
        }
        let rel = rel_error(aa.sqrt(), nn.sqrt(), dd.sqrt());
        if rel > report.max_rel_error || report.worst_tensor.is_none() {
            report.max_rel_error = rel;
            report.worst_tensor = Some(store.name(id).to_string());
        }
    }
    Ok(report)
}
