//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the gradient from [`Graph::backward`] with
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every learnable parameter.
///
/// `build` must construct the same scalar loss on every call for the same
/// parameter values; anything stochastic inside it has to be replayed.
pub fn grad_check<F>(
    params: &ParamSet,
    step: f64,
    tolerance: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step {step}")));
    }
    let mut work = params.clone();
    work.zero_grad();

    fn eval<F>(build: &mut F, ps: &ParamSet) -> Result<f64>
    where
        F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
    {
        let mut g = Graph::new();
        let loss = build(&mut g, ps)?;
        g.scalar(loss)
    }

    let ids: Vec<_> = work
        .iter()
        .filter(|(_, p)| p.learnable)
        .map(|(id, _)| id)
        .collect();
    if ids.is_empty() {
        return Ok(GradCheckReport {
            entries_checked: 0,
            max_rel_error: 0.0,
            worst: None,
            tolerance,
            passed: true,
        });
    }

    let first = eval(&mut build, &work)?;
    let second = eval(&mut build, &work)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    {
        let mut g = Graph::new();
        let loss = build(&mut g, &work)?;
        g.backward(loss, &mut work)?;
    }

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for id in ids {
        for k in 0..work.value(id).len() {
            let original = work.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = original + step;
            let plus = eval(&mut build, &work)?;
            work.get_mut(id).value.data_mut()[k] = original - step;
            let minus = eval(&mut build, &work)?;
            work.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = work.grad(id).data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((work.get(id).name.clone(), k));
            }
        }
    }

    Ok(GradCheckReport {
        entries_checked: checked,
        max_rel_error: max_rel,
        worst,
        tolerance,
        passed: max_rel < tolerance,
    })
}
