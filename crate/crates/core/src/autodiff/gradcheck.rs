use crate::error::{Result, SdcError};

use super::params::ParamStore;
use super::tape::{NodeId, Tape};

const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(1e-6, |a| + |n|)`. The floor keeps round-off in
/// differences of exactly-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences with perturbation `step`, returning the largest relative
/// error over all parameter coordinates.
///
/// Gradient slots of `params` are reset before the analytic pass and hold
/// the analytic gradient afterwards; parameter values are restored.
pub fn grad_check<F>(build: F, params: &mut ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    grad_check_where(build, params, step, |_| true)
}

/// [`grad_check`] restricted to parameters whose name satisfies `include`.
pub fn grad_check_where<F, P>(build: F, params: &mut ParamStore, step: f64, include: P) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
    P: Fn(&str) -> bool,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(SdcError::Config(format!("grad_check step must be positive, got {step}")));
    }
    params.zero_grads();
    let (tape, root) = build(params)?;
    tape.backward(root, params)?;

    let eval = |params: &ParamStore, location: &dyn Fn() -> String| -> Result<f64> {
        let (tape, root) = build(params)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(SdcError::NonFinite { location: location() });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().filter(|id| include(params.name(*id))).collect();
    for id in ids {
        for i in 0..params.value(id).len() {
            let name = params.name(id).to_string();
            let location = || format!("{name}[{i}]");
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + step;
            let plus = eval(params, &location);
            params.value_mut(id).data_mut()[i] = original - step;
            let minus = eval(params, &location);
            params.value_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = params.grad(id).data()[i];
            if !analytic.is_finite() {
                return Err(SdcError::NonFinite { location: location() });
            }
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
