use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one [`Var`] per parameter (registered as
/// parameter ids `0..params.len()`) and must return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    grad_check_report(f, params, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Range {
            what: "eps",
            value: eps,
            range: "(0, inf)",
        });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?.into_ordered(params.len())?
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((pi, k, a, numeric));
            }
        }
    }
    Ok(report)
}
