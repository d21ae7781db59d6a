//! Central finite-difference checks of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Relative tolerance against the larger of the two magnitudes.
    pub rel: f64,
    /// Absolute floor, used when both gradients are tiny.
    pub abs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

pub fn grads_agree(analytic: f64, numeric: f64, tol: GradCheck) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= tol.abs || diff <= tol.rel * analytic.abs().max(numeric.abs())
}

/// Runs `f` once with `params` as tape leaves, backpropagates, then compares
/// every gradient entry to `(f(p+h) − f(p−h)) / 2h`.
pub fn check_gradients(
    params: &[Tensor<f64>],
    tol: GradCheck,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> core::result::Result<GradReport, String> {
    let eval = |ps: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (mut tape, vars, loss) = eval(params).map_err(|e| format!("{e}"))?;
    tape.backward(loss).map_err(|e| format!("{e}"))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; p.len()]))
        .collect();
    let mut report = GradReport::default();
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + tol.step;
            let plus = eval(&work).map_err(|e| format!("{e}"))?;
            let plus = plus.0.value(plus.2).item();
            work[pi].data_mut()[i] = orig - tol.step;
            let minus = eval(&work).map_err(|e| format!("{e}"))?;
            let minus = minus.0.value(minus.2).item();
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * tol.step);
            let a = analytic[pi][i];
            report.checked += 1;
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                report.worst_rel = report.worst_rel.max((a - numeric).abs() / scale);
            }
            if !grads_agree(a, numeric, tol) {
                report.failures.push(format!("param {pi}[{i}]: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    if report.failures.is_empty() {
        Ok(report)
    } else {
        Err(format!("{} of {} entries disagree: {:?}", report.failures.len(), report.checked, report.failures))
    }
}
