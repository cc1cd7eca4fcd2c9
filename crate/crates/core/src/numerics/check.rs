use super::grid::Grid;
use super::tape::{ParamId, ParamSet, Tape, Var};
use crate::error::Result;
use crate::scalar::Real;

/// Builds a scalar loss on a fresh tape from the current parameter values.
pub trait LossFn<S: Real>: FnMut(&ParamSet<S>) -> Result<(Tape<S>, Var)> {}
impl<S: Real, F: FnMut(&ParamSet<S>) -> Result<(Tape<S>, Var)>> LossFn<S> for F {}

fn eval<S: Real>(f: &mut impl LossFn<S>, params: &ParamSet<S>) -> Result<S> {
    let (tape, loss) = f(params)?;
    tape.value(loss).item()
}

fn analytic<S: Real>(f: &mut impl LossFn<S>, params: &ParamSet<S>) -> Result<Vec<Grid<S>>> {
    let (tape, loss) = f(params)?;
    let mut out: Vec<Grid<S>> = params.iter().map(|p| Grid::zeros(p.value.shape())).collect();
    for (id, g) in tape.gradients(loss)? {
        out[id.index()] = g;
    }
    Ok(out)
}

fn check_one<S: Real>(
    f: &mut impl LossFn<S>,
    params: &mut ParamSet<S>,
    id: ParamId,
    grad: &Grid<S>,
    h: S,
) -> Result<S> {
    let two_h = h + h;
    let mut worst = S::zero();
    for i in 0..params.get(id).value.len() {
        let orig = params.get(id).value.values()[i];
        params.get_mut(id).value.values_mut()[i] = orig + h;
        let up = eval(f, params);
        params.get_mut(id).value.values_mut()[i] = orig - h;
        let down = eval(f, params);
        params.get_mut(id).value.values_mut()[i] = orig;
        let numeric = (up? - down?) / two_h;
        let a = grad.values()[i];
        let err = (a - numeric).abs() / S::one().max(a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest relative error `|analytic - central| / max(1, |analytic|)` over the
/// coordinates of one parameter.
pub fn finite_difference_check<S: Real>(
    params: &mut ParamSet<S>,
    id: ParamId,
    h: S,
    mut f: impl LossFn<S>,
) -> Result<S> {
    let grads = analytic(&mut f, params)?;
    check_one(&mut f, params, id, &grads[id.index()], h)
}

/// Runs [`finite_difference_check`] for every parameter, returning `(name, error)` pairs.
pub fn gradient_check_all<S: Real>(
    params: &mut ParamSet<S>,
    h: S,
    mut f: impl LossFn<S>,
) -> Result<Vec<(String, S)>> {
    let grads = analytic(&mut f, params)?;
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let err = check_one(&mut f, params, id, &grads[id.index()], h)?;
        out.push((params.get(id).name.clone(), err));
    }
    Ok(out)
}
