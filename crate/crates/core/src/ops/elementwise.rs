use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record("add", out, &[a, b], |ctx| {
            Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record("sub", out, &[a, b], |ctx| {
            Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))])
        })
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record("mul", out, &[a, b], |ctx| {
            let ga = ctx.needs(0).then(|| ctx.grad.zip_map(ctx.input(1), |g, y| g * y)).transpose()?;
            let gb = ctx.needs(1).then(|| ctx.grad.zip_map(ctx.input(0), |g, x| g * x)).transpose()?;
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, &[a], move |ctx| Ok(vec![Some(ctx.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.record("add_scalar", out, &[a], |ctx| Ok(vec![Some(ctx.grad.clone())]))
    }

    /// Sum of an arbitrary number of equal-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            out.expect_same_shape("add_n", v)?;
            out.add_assign(v);
        }
        let n = xs.len();
        self.record("add_n", out.with_requires_grad(false), xs, move |ctx| {
            Ok((0..n).map(|_| Some(ctx.grad.clone())).collect())
        })
    }
}

/// Multiplies every element of `t` by the matching element of `w` and sums.
pub(crate) fn dot(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}
