use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axis_layout, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    /// Exact (erf-based) GELU.
    Gelu,
    /// ELU with alpha = 1.
    Elu,
    /// Dense attention kernel: `a + 1` for `a >= 0`, `exp(a)` otherwise.
    Dak,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    /// Smooth L1 (Huber / beta) with transition point `beta`.
    SmoothL1 { beta: f64 },
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Dak => {
                if x >= 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::SmoothL1 { beta } => {
                let a = x.abs();
                if a < beta {
                    0.5 * x * x / beta
                } else {
                    a - 0.5 * beta
                }
            }
        }
    }

    /// Derivative at `x`, given the forward value `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::Dak => {
                if x >= 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::SmoothL1 { beta } => {
                if x.abs() < beta {
                    x / beta
                } else {
                    x.signum()
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Elu => "elu",
            Unary::Dak => "dak",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over `len`-long strided slices.
pub(crate) fn softmax_slices(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(data[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..len {
                let e = (data[base + k * inner] - m).exp();
                data[base + k * inner] = e;
                s += e;
            }
            for k in 0..len {
                data[base + k * inner] /= s;
            }
        }
    }
}

/// Adjoint of softmax given its output `y` and upstream gradient `g`.
pub(crate) fn softmax_vjp(y: &[f64], g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|k| y[base + k * inner] * g[base + k * inner]).sum();
            for k in 0..len {
                let j = base + k * inner;
                dx[j] = y[j] * (g[j] - dot);
            }
        }
    }
    dx
}

impl Graph {
    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let out = self.value(x).map(|v| kind.eval(v));
        self.record(kind.name(), out, &[x], move |ctx| {
            let input = ctx.input(0).data();
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(input)
                .zip(ctx.output.data())
                .map(|((g, &x), &y)| g * kind.derivative(x, y))
                .collect();
            Ok(vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data)?)])
        })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Elu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    /// Softmax along `axis`; every slice along that axis sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let mut out = self.value(x).clone().with_requires_grad(false);
        softmax_slices(out.data_mut(), outer, len, inner);
        self.record("softmax", out, &[x], move |ctx| {
            let dx = softmax_vjp(ctx.output.data(), ctx.grad.data(), outer, len, inner);
            Ok(vec![Some(Tensor::new(ctx.grad.shape().to_vec(), dx)?)])
        })
    }
}
