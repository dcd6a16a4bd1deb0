use crate::error::{domain_err, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    /// Worst relative error over every checked entry.
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &[Matrix], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(domain_err!("objective is not finite ({value})"));
    }
    Ok(value)
}

/// Tape gradients of `f` at `params`, one matrix per parameter.
pub fn analytic_gradients<F>(params: &[Matrix], f: &F) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(domain_err!("objective is not finite ({value})"));
    }
    let mut grads = tape.backward(out)?;
    let list = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, list))
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, entry by entry, for every parameter.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &[Matrix], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(params, &f)?;
    let mut work: Vec<Matrix> = params.to_vec();
    let mut per_param = vec![0.0f64; params.len()];
    let mut worst = None;
    let mut max_rel_error = 0.0f64;
    let mut entries_checked = 0;
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[p].data_mut()[e] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[p].data()[e], numeric);
            entries_checked += 1;
            if err > per_param[p] {
                per_param[p] = err;
            }
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((p, e));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        worst,
        entries_checked,
    })
}
