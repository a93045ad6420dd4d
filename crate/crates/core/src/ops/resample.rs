use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// 2×2 average pooling of a `(c, h, w)` map with even `h` and `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{h}x{w} is not even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let b = ch * h * w + 2 * y * w + 2 * xo;
                    out[(ch * ho + y) * wo + xo] = 0.25 * (xs[b] + xs[b + 1] + xs[b + w] + xs[b + w + 1]);
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        self.record("avg_pool2", out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for xi in 0..w {
                        dx[(ch * h + y) * w + xi] = 0.25 * g[(ch * ho + y / 2) * wo + xi / 2];
                    }
                }
            }
            Ok(vec![Some(Tensor::new([c, h, w], dx)?)])
        })
    }

    /// Nearest-neighbour upsampling of a `(c, h, w)` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if factor == 0 {
            return Err(Error::arg("upsample_nearest", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    out[(ch * ho + y) * wo + xo] = xs[(ch * h + y / factor) * w + xo / factor];
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        self.record("upsample_nearest", out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for xo in 0..wo {
                        dx[(ch * h + y / factor) * w + xo / factor] += g[(ch * ho + y) * wo + xo];
                    }
                }
            }
            Ok(vec![Some(Tensor::new([c, h, w], dx)?)])
        })
    }
}
