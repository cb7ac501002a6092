//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes on perturbed copies
//! of the parameter store, so it shares no code with [`Tape::backward`].

use crate::autograd::{Tape, Var};
use crate::params::ParamStore;

/// Worst disagreement between analytic and numerical gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Scalar entries compared.
    pub checked: usize,
    /// `(parameter name, flat index)` of the worst relative error.
    pub worst: Option<(alloc::string::String, usize)>,
}

/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator so
/// entries whose true gradient is zero are judged on absolute error.
pub const FLOOR: f64 = 1e-6;

fn eval<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape);
    tape.value(loss).scalar()
}

/// Compares `Tape::backward` against `(f(θ+h) − f(θ−h)) / 2h` for every
/// trainable scalar in `store`.
pub fn check_gradients<F>(store: &ParamStore, step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.backward(loss)
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.entry(id).trainable {
            continue;
        }
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&probe, &build);
            probe.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&probe, &build);
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let abs = libm::fabs(exact - numeric);
            let rel = abs / libm::fabs(exact).max(libm::fabs(numeric)).max(FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.entry(id).name.clone(), k));
            }
        }
    }
    report
}
