//! Central-difference gradient checking against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;
use crate::wide::Wide;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` of the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar returned by `f` with central
/// differences of step `eps`, over every entry of every parameter.
pub fn grad_check<S, F>(names: &[String], params: &[Tensor<S>], eps: f64, f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let analytic = tape_grads(params, &f)?;
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let h: S = lit(eps);
    compare(names, analytic, |pi, j| {
        let up = perturbed(&mut work, pi, j, h, &f)?;
        let down = perturbed(&mut work, pi, j, -h, &f)?;
        Ok(to_f64(up - down) / (2.0 * eps))
    })
}

/// [`grad_check`] with the central differences evaluated in double-double
/// arithmetic by `reference`, which must compute the same function as `f`.
///
/// In `f64` each difference carries roughly `ulp(loss) / eps` of rounding
/// noise, about 1e-10 for an O(1) loss at `eps = 1e-6`, so entries with
/// gradients near 1e-5 cannot be resolved to a relative 1e-5. The wide
/// reference removes that floor and leaves only the O(eps^2) truncation term.
pub fn grad_check_wide<F, R>(
    names: &[String],
    params: &[Tensor<f64>],
    eps: f64,
    f: F,
    reference: R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Fn(&mut Tape<Wide>, &[Var]) -> Result<Var>,
{
    let analytic = tape_grads(params, &f)?;
    let mut work: Vec<Tensor<Wide>> = params
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| Wide::new(x)).collect()))
        .collect::<Result<_>>()?;
    let h = Wide::new(eps);
    compare(names, analytic, |pi, j| {
        let up = perturbed(&mut work, pi, j, h, &reference)?;
        let down = perturbed(&mut work, pi, j, -h, &reference)?;
        Ok(to_f64((up - down) / Wide::new(2.0 * eps)))
    })
}

/// A scalar function that can be recorded at any precision.
pub trait Objective {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, vars: &[Var]) -> Result<Var>;
}

/// [`grad_check_wide`] for an [`Objective`], which supplies both closures.
pub fn grad_check_objective<O: Objective>(
    names: &[String],
    params: &[Tensor<f64>],
    eps: f64,
    objective: &O,
) -> Result<GradCheckReport> {
    grad_check_wide(
        names,
        params,
        eps,
        |tape, vars| objective.record(tape, vars),
        |tape, vars| objective.record(tape, vars),
    )
}

fn eval<S: Scalar>(ps: &[Tensor<S>], f: &impl Fn(&mut Tape<S>, &[Var]) -> Result<Var>) -> Result<S> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss)[0])
}

fn perturbed<S: Scalar>(
    work: &mut [Tensor<S>],
    pi: usize,
    j: usize,
    h: S,
    f: &impl Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
) -> Result<S> {
    let orig = work[pi].data()[j];
    work[pi].data_mut()[j] = orig + h;
    let out = eval(work, f);
    work[pi].data_mut()[j] = orig;
    out
}

fn tape_grads<S: Scalar>(
    params: &[Tensor<S>],
    f: &impl Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    vars.iter()
        .map(|&v| Ok(tape.grad(v)?.iter().map(|&g| to_f64(g)).collect()))
        .collect()
}

fn compare(
    names: &[String],
    analytic: Vec<Vec<f64>>,
    mut numeric: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(analytic.len()),
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for (j, &a) in grads.iter().enumerate() {
            let n = numeric(pi, j)?;
            let rel = relative_error(a, n);
            if j == 0 || rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = (j, a, n);
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.7).sin()).unwrap();
        let x = Tensor::from_fn(vec![4, 2], |i| (i as f64 * 1.3).cos()).unwrap();
        let report = grad_check(&["w".into()], &[w], 1e-6, |tape, vars| {
            let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
            let y = tape.matmul(vars[0], xv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_backward_rule_is_detected() {
        let x = Tensor::from_fn(vec![5], |i| 0.3 + i as f64).unwrap();
        let report = grad_check(&["x".into()], &[x], 1e-6, |tape, vars| {
            let v = tape.value(vars[0]).to_vec();
            let y = tape.linear(vars[0], vec![5], v, Box::new(|g: &[f64]| g.iter().map(|x| -x).collect()))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}
