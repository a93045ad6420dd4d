use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axis_layout, Tensor};

/// Slices whose Euclidean norm falls below this are mapped to zero.
pub const L2_EPS: f64 = 1e-6;

/// Variance floor inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-10;

impl Graph {
    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("l2_normalize", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let n = (0..len).map(|k| xs[base + k * inner].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n;
                if n >= L2_EPS {
                    for k in 0..len {
                        out[base + k * inner] = xs[base + k * inner] / n;
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.record("l2_normalize", out, &[x], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let n = norms[o * inner + i];
                    if n < L2_EPS {
                        continue;
                    }
                    let base = o * len * inner + i;
                    let yg: f64 = (0..len).map(|k| y[base + k * inner] * g[base + k * inner]).sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        dx[j] = (g[j] - y[j] * yg) / n;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(ctx.grad.shape().to_vec(), dx)?)])
        })
    }

    /// Normalises over the leading (channel) axis at every position, then
    /// applies per-channel `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.shape(gain) != [c] || self.shape(offset) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / offset {:?} for {c} channels",
                    self.shape(gain),
                    self.shape(offset)
                ),
            ));
        }
        let m = self.value(x).numel() / c;
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(offset).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; m];
        for p in 0..m {
            let mean = (0..c).map(|k| xs[k * m + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|k| (xs[k * m + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[p] = r;
            for k in 0..c {
                xhat[k * m + p] = (xs[k * m + p] - mean) * r;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(j, &h)| h * gs[j / m] + bs[j / m])
            .collect();
        let out = Tensor::new(shape, out)?;
        self.record("layer_norm", out, &[x, gain, offset], move |ctx| {
            let g = ctx.grad.data();
            let gain = ctx.input(1).data();
            let mut dgain = vec![0.0; c];
            let mut doff = vec![0.0; c];
            for (j, (&gj, &h)) in g.iter().zip(&xhat).enumerate() {
                dgain[j / m] += gj * h;
                doff[j / m] += gj;
            }
            let mut dx = vec![0.0; g.len()];
            for p in 0..m {
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for k in 0..c {
                    let dh = g[k * m + p] * gain[k];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat[k * m + p];
                }
                let inv_c = 1.0 / c as f64;
                for k in 0..c {
                    let j = k * m + p;
                    let dh = g[j] * gain[k];
                    dx[j] = rstd[p] * (dh - inv_c * sum_dh - xhat[j] * inv_c * sum_dh_h);
                }
            }
            Ok(vec![
                Some(Tensor::new(ctx.grad.shape().to_vec(), dx)?),
                Some(Tensor::new([c], dgain)?),
                Some(Tensor::new([c], doff)?),
            ])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(v: Vec<f64>) -> Vec<f64> {
        let n = v.len();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([n], v).unwrap());
        let y = g.l2_normalize(x, 0).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn l2_normalize_examples() {
        let y = l2(vec![3.0, 4.0]);
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2(vec![0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(l2(vec![0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2(vec![1e-7, 0.0]), vec![0.0, 0.0]);
    }

    fn ln(x: Tensor, gain: Vec<f64>, offset: Vec<f64>) -> Tensor {
        let c = gain.len();
        let mut g = Graph::new();
        let x = g.input(x);
        let ga = g.input(Tensor::new([c], gain).unwrap());
        let of = g.input(Tensor::new([c], offset).unwrap());
        let y = g.layer_norm(x, ga, of).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let y = ln(Tensor::full([3, 2, 2], 5.0), vec![1.0; 3], vec![0.0; 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_channels() {
        let y = ln(Tensor::new([2, 1, 1], vec![1.0, -1.0]).unwrap(), vec![1.0; 2], vec![0.0; 2]);
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_gain_gives_offset() {
        let x = Tensor::from_fn([2, 2, 3], |i| (i as f64).sin());
        let y = ln(x, vec![0.0; 2], vec![0.5, -2.0]);
        for (j, &v) in y.data().iter().enumerate() {
            assert_eq!(v, if j < 6 { 0.5 } else { -2.0 });
        }
    }

    #[test]
    fn layer_norm_rejects_bad_gain() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones([3, 2, 2]));
        let ga = g.input(Tensor::ones([2]));
        let of = g.input(Tensor::ones([3]));
        assert!(g.layer_norm(x, ga, of).is_err());
    }
}
