//! Test-only numerical oracles.
//!
//! Central finite differences over a closure that rebuilds the computation on
//! a fresh tape. Nothing here is used by the library itself.

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Evaluates `f` on constants built from `inputs` and returns the scalar.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad(false))).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central-difference gradient of `f` with respect to every input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..g.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_scalar(&work, f)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_scalar(&work, f)?;
            work[i].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Reverse-mode gradient of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, &f)?;
    let n = numeric_gradients(inputs, &f, FD_STEP)?;
    Ok(a.iter().zip(&n).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max))
}

/// Tensor of the given shape with entries uniform in `[-scale, scale)`.
pub fn random_tensor(rng: &mut crate::Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// Per-parameter relative error between the backward pass and central
/// differences for a loss that reads parameters from a store inside `state`.
/// `store` selects which store to perturb; frozen parameters are skipped.
pub fn param_gradient_errors<S, A, F>(state: &mut S, store: A, f: F) -> Result<Vec<(String, f64)>>
where
    A: Fn(&mut S) -> &mut ParamStore,
    F: Fn(&mut Tape, &S) -> Result<Var>,
{
    store(state).zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, state)?;
    let grads = tape.gradients(loss)?;
    drop(tape);
    grads.accumulate_into(store(state));
    let ids: Vec<ParamId> = store(state).ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        if !store(state).get(id).requires_grad() {
            continue;
        }
        let analytic = store(state)
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store(state).get(id).numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let orig = store(state).get(id).data()[j];
            store(state).get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval_state(state, &f)?;
            store(state).get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval_state(state, &f)?;
            store(state).get_mut(id).data_mut()[j] = orig;
            *g = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push((store(state).name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    store(state).zero_grads();
    Ok(out)
}

fn eval_state<S, F>(state: &S, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &S) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, state)?;
    Ok(tape.value(out).item())
}
