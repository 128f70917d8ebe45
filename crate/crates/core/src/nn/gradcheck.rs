//! Central finite-difference checks for tape gradients (run in f64).

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-6,
            max_per_param: usize::MAX,
        }
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare analytic gradients of `loss` with central differences over every
/// parameter in `store`. `loss` must build a scalar from the tape.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    opts: GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in 0..store.len() {
        let n = store.value(id).numel();
        let stride = n.div_ceil(opts.max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + opts.h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - opts.h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let e = rel_err(analytic.get(id).data()[j], numeric, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = e;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
