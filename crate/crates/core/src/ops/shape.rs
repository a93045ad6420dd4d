use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::arg("concat", "no inputs"));
        };
        let rest = self.shape(first)[1..].to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != rest[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {rest:?}")));
            }
            lead.push(s[0]);
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&rest);
        let inner: usize = rest.iter().product();
        let out = Tensor::new(shape, data)?;
        self.record("concat", out, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut off = 0;
            let mut res = Vec::with_capacity(lead.len());
            for (i, &l) in lead.iter().enumerate() {
                let len = l * inner;
                res.push(if ctx.needs(i) {
                    Some(Tensor::new(ctx.input(i).shape().to_vec(), g[off..off + len].to_vec())?)
                } else {
                    None
                });
                off += len;
            }
            Ok(res)
        })
    }

    /// Channels `start..start + len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow0(start, len)?;
        let full = self.shape(x).to_vec();
        self.record("narrow", out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(full.clone());
            let inner = dx.numel() / full[0];
            dx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(ctx.grad.data());
            Ok(vec![Some(dx)])
        })
    }

    /// Splits the leading axis into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if total != self.shape(x)[0] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not cover {}", self.shape(x)[0]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        let orig = self.shape(x).to_vec();
        self.record("reshape", out, &[x], move |ctx| {
            Ok(vec![Some(ctx.grad.clone().reshape(orig.clone())?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_round_trips() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn([2, 3], |i| i as f64));
        let b = g.input(Tensor::from_fn([1, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 3]);
        let parts = g.split(c, &[2, 1]).unwrap();
        assert_eq!(g.value(parts[0]), g.value(a));
        assert_eq!(g.value(parts[1]), g.value(b));
    }

    #[test]
    fn concat_rejects_trailing_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones([2, 3]));
        let b = g.input(Tensor::ones([2, 4]));
        assert!(g.concat(&[a, b]).is_err());
        assert!(g.split(a, &[1, 2]).is_err());
    }
}
