//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor2D, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients that are
/// zero up to round-off do not dominate the report.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(
    build: &F,
    inputs: &[Tensor2D<f64>],
    seq_len: usize,
    with_grad: bool,
) -> Result<(f64, Vec<Tensor2D<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(seq_len);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let mut out = build(&mut g, &vars)?;
    if g.value(out).shape() != (1, 1) {
        // fixed random projection to a scalar
        let (r, c) = g.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        let w = Tensor2D::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        out = g.dot(out, w)?;
    }
    let value = g.value(out).item();
    if !value.is_finite() {
        return Err(Error::Numerical("gradient check produced a non-finite output".into()));
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor2D::zeros(t.rows(), t.cols()))
        })
        .collect();
    Ok((value, grads))
}

/// Compares analytic gradients of the scalar built by `build` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
///
/// Non-scalar outputs are reduced with a fixed random projection first.
pub fn grad_check<F>(inputs: &[Tensor2D<f64>], seq_len: usize, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&build, inputs, seq_len, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + eps;
            let (plus, _) = evaluate(&build, &probe, seq_len, false)?;
            probe[i].data_mut()[k] = orig - eps;
            let (minus, _) = evaluate(&build, &probe, seq_len, false)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[k];
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but perturbs every element of every parameter in
/// `store` whose name starts with `prefix`. `build` binds parameters itself
/// (through [`Graph::param`]) and must return a scalar.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    prefix: &str,
    seq_len: usize,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let run = |s: &ParamStore<f64>, with_grad: bool| -> Result<(f64, Option<Graph<f64>>)> {
        let mut g = Graph::new(seq_len);
        let out = build(&mut g, s)?;
        if g.value(out).shape() != (1, 1) {
            return Err(Error::Shape("parameter gradient check needs a scalar output".into()));
        }
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numerical("gradient check produced a non-finite output".into()));
        }
        if with_grad {
            g.backward(out)?;
            Ok((v, Some(g)))
        } else {
            Ok((v, None))
        }
    };
    let (_, g) = run(store, true)?;
    let grads = g.expect("graph kept").param_grads();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(String::from)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut probe = store.clone();
    for (i, name) in names.iter().enumerate() {
        let len = store.get(name)?.len();
        for k in 0..len {
            let orig = store.get(name)?.data()[k];
            probe.get_mut(name)?.data_mut()[k] = orig + eps;
            let (plus, _) = run(&probe, false)?;
            probe.get_mut(name)?.data_mut()[k] = orig - eps;
            let (minus, _) = run(&probe, false)?;
            probe.get_mut(name)?.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads.get(name).map_or(0.0, |t| t.data()[k]);
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
