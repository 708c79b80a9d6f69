//! Central finite-difference gradient checking.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for the relative error: gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(x + h) - f(x - h)) / 2h` for every element of every input.
///
/// `f` receives a fresh graph and one leaf per input, and must return a
/// scalar node.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_subset(inputs, h, usize::MAX, f)
}

/// Like [`check`], with every parameter of `store` as an extra input after
/// `inputs`. `f` receives the parameters bound in store order.
///
/// Tensors with more than `max_per_tensor` elements are checked at evenly
/// strided positions only.
pub fn check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    max_per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(vars[n_in..].to_vec());
        f(g, &bound, &vars[..n_in])
    };
    check_subset(&all, h, max_per_tensor, build)
}

fn check_subset<F>(inputs: &[Tensor], h: f64, max_per_tensor: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let n = inputs[ti].numel();
        let step = n.div_ceil(max_per_tensor.max(1)).max(1);
        for ei in (0..n).step_by(step) {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = e;
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces an arbitrary-shape node to a scalar via a fixed random projection,
/// so that every output element contributes a distinct gradient.
pub fn project(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.leaf(weights.clone().reshape(g.shape(x).to_vec())?);
    let p = g.hadamard(x, w)?;
    Ok(g.sum(p))
}
