//! Central finite-difference reference for analytic gradients.

use super::{ParamSet, Real};

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic(param_id, index)` against `(f(θ+h) − f(θ−h)) / 2h` for
/// each requested coordinate. `loss` only ever sees perturbed parameters.
pub fn check_coordinates<T: Real>(
    params: &ParamSet<T>,
    coords: &[(usize, usize)],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamSet<T>) -> f64,
    analytic: impl Fn(usize, usize) -> f64,
) -> Vec<CoordCheck> {
    let mut work = params.clone();
    coords
        .iter()
        .map(|&(id, idx)| {
            let orig = work.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = T::of(orig.as_f64() + h);
            let up = loss(&work);
            work.get_mut(id).data_mut()[idx] = T::of(orig.as_f64() - h);
            let down = loss(&work);
            work.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic(id, idx);
            CoordCheck {
                param: params.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, floor),
            }
        })
        .collect()
}
