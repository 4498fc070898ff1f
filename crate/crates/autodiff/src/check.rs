//! Finite-difference validation of reverse-mode gradients.

use crate::error::{AutodiffError, Result};
use crate::param::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so components that are zero
/// on both sides compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value_ref(v).item()
}

/// Compare the reverse-mode gradient of a scalar function at `point` with
/// central finite differences.
pub fn grad_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let shape = tape.shape(y);
    if shape.iter().product::<usize>() != 1 {
        return Err(AutodiffError::NonScalar { shape });
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()))
        .into_data();

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&tape, x)?;
        scalar_of(&tape, y)
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * FD_STEP));
    }
    Ok(report(analytic, numeric, tolerance))
}

/// Gradient check with respect to the parameters of a model. At most
/// `max_per_param` evenly spaced coordinates of each parameter are probed.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    max_per_param: usize,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let y = f(&tape, &bound)?;
    let shape = tape.shape(y);
    if shape.iter().product::<usize>() != 1 {
        return Err(AutodiffError::NonScalar { shape });
    }
    let grads = tape.backward(y)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let y = f(&tape, &bound)?;
        scalar_of(&tape, y)
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = params.clone();
    let ids: Vec<_> = params.iter().map(|p| params.id(&p.name).unwrap()).collect();
    for id in ids {
        let len = params.get(id).value.len();
        let grad = grads.get(bound.get(id));
        for i in sample_indices(len, max_per_param) {
            analytic.push(grad.map_or(0.0, |g| g.data()[i]));
            let orig = params.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(report(analytic, numeric, tolerance))
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    if max <= 1 {
        return vec![0];
    }
    (0..max).map(|k| k * (len - 1) / (max - 1)).collect()
}

fn report(analytic: Vec<f64>, numeric: Vec<f64>, tolerance: f64) -> GradCheckReport {
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tolerance,
    }
}
