//! Central finite-difference checks for taped computations.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward implementation it is compared against.

use crate::error::Result;

use super::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// Relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v)[0]
}

/// Compares analytic and numeric gradients of `f` with respect to every element of `inputs`.
/// Returns the relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let l = f(&mut tape, &vars)?;
        Ok(scalar_of(&tape, l))
    };

    let mut errs = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= step;
            numeric[j] = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        }
        errs.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errs)
}

/// Finite-difference check over (a sample of) the entries of a parameter set.
///
/// At most `per_tensor` entries of each tensor are probed (evenly strided).
/// Returns the relative error over all probed entries jointly.
pub fn check_params<F>(params: &ParamSet<f64>, step: f64, per_tensor: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let flat = params.collect_grads(&bound, &mut grads);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let l = f(&mut tape, &b)?;
        Ok(scalar_of(&tape, l))
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = params.get(id).numel();
        let stride = (n / per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_tensor) {
            let orig = work.get(id).data[j];
            work.get_mut(id).data[j] = orig + step;
            let lp = eval(&work)?;
            work.get_mut(id).data[j] = orig - step;
            let lm = eval(&work)?;
            work.get_mut(id).data[j] = orig;
            numeric.push((lp - lm) / (2.0 * step));
            analytic.push(flat[k][j]);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
