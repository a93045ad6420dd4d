//! Reverse-mode gradients checked against central finite differences.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::Parameterized;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default acceptance threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradReport {
    fn new(op_name: &str, max_rel_error: f64, tolerance: f64, checked: usize) -> Self {
        GradReport {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
            checked,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl Parameterized for () {
    fn visit(&self, _: &mut dyn FnMut(&crate::param::Param)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut crate::param::Param)) {}
}

/// Checks the gradient of a scalar-valued `f` with respect to every entry of
/// every input tensor.
pub fn grad_check<F>(op_name: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_params(op_name, &(), inputs, tolerance, |g, _, xs| f(g, xs))
}

/// Like [`grad_check`], but also differentiates with respect to every
/// parameter reachable from `module`.
pub fn grad_check_with_params<M, F>(
    op_name: &str,
    module: &M,
    inputs: &[Tensor],
    tolerance: f64,
    f: F,
) -> Result<GradReport>
where
    M: Parameterized + Clone,
    F: Fn(&mut Graph, &M, &[Var]) -> Result<Var>,
{
    let eval = |m: &M, xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, m, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, module, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut xs = inputs.to_vec();
        for j in 0..input.numel() {
            let orig = input.data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(module, &xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(module, &xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }

    let mut params = Vec::new();
    module.visit(&mut |p| params.push((p.id(), p.value().numel())));
    for (k, &(id, numel)) in params.iter().enumerate() {
        let zeros = Tensor::zeros(vec![numel]);
        let analytic = grads.param(id).unwrap_or(&zeros);
        for j in 0..numel {
            let perturbed = |delta: f64| {
                let mut m = module.clone();
                let mut idx = 0;
                m.visit_mut(&mut |p| {
                    if idx == k {
                        p.value_mut().data_mut()[j] += delta;
                    }
                    idx += 1;
                });
                m
            };
            let up = eval(&perturbed(FD_STEP), inputs)?;
            let down = eval(&perturbed(-FD_STEP), inputs)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }

    Ok(GradReport::new(op_name, worst, tolerance, checked))
}
