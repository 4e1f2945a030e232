//! Central finite-difference gradient checking.
//!
//! Non-scalar outputs are reduced with fixed, non-uniform weights so that
//! every output element contributes and symmetric errors cannot cancel.
//! Errors are norm-wise: `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.

use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default step for double precision.
pub const STEP: f64 = 1e-5;

fn reduction_weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| 1.0 + 0.5 * libm::sin(1.7 * i as f64 + 0.3))
}

fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(reduction_weights(n));
    let prod = g.mul(flat, w)?;
    Ok(g.sum(prod))
}

fn scalar_value(f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = reduce(&mut g, out)?;
    g.value(l).item()
}

/// Relative error of the gradient with respect to every entry of `inputs`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = reduce(&mut g, out)?;
    g.backward(l)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(core::iter::repeat_n(0.0, t.len())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = scalar_value(&f, &work)?;
            work[k].data_mut()[i] = orig - h;
            let down = scalar_value(&f, &work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Relative error of the gradient with respect to the listed parameter
/// coordinates `(id, flat index)`.
pub fn check_params(store: &ParamStore, coords: &[(ParamId, usize)], f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>, h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let l = reduce(&mut g, out)?;
    g.backward(l)?;
    let grads = g.param_grads();
    let lookup = |id: ParamId, i: usize| -> f64 {
        grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.data()[i])
            .unwrap_or(0.0)
    };
    let analytic: Vec<f64> = coords.iter().map(|&(id, i)| lookup(id, i)).collect();
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let l = reduce(&mut g, out)?;
        g.value(l).item()
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
