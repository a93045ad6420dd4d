use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

use super::elementwise::dot;

impl Graph {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.record("sum", out, &[x], move |ctx| {
            Ok(vec![Some(Tensor::full(shape.clone(), ctx.grad.data()[0]))])
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over the entries where `mask` is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "masked_mean",
                format!("mask of {} for {} values", mask.len(), self.value(x).numel()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let inv = 1.0 / count as f64;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let mask = mask.to_vec();
        let shape = self.shape(x).to_vec();
        self.record("masked_mean", Tensor::scalar(total * inv), &[x], move |ctx| {
            let g = ctx.grad.data()[0] * inv;
            let data = mask.iter().map(|&m| if m { g } else { 0.0 }).collect();
            Ok(vec![Some(Tensor::new(shape.clone(), data)?)])
        })
    }

    /// `sum(w ⊙ x)` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        self.value(x).expect_same_shape("weighted_sum", w)?;
        let out = Tensor::scalar(dot(self.value(x), w));
        let w = w.clone();
        self.record("weighted_sum", out, &[x], move |ctx| {
            let g = ctx.grad.data()[0];
            Ok(vec![Some(w.map(|v| v * g))])
        })
    }
}
