//! Multi-head scaled dot-product attention over flattened spatial tokens,
//! kept as the quadratic-cost baseline.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

use super::QkvTriple;

/// Per-head token-major copy: `out[i * dk + d] = x[(head * dk + d) * n + i]`.
fn gather_head(x: &[f64], head: usize, dk: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dk];
    for d in 0..dk {
        let src = &x[(head * dk + d) * n..][..n];
        for (i, &v) in src.iter().enumerate() {
            out[i * dk + d] = v;
        }
    }
    out
}

fn scatter_head(src: &[f64], head: usize, dk: usize, n: usize, x: &mut [f64]) {
    for d in 0..dk {
        let dst = &mut x[(head * dk + d) * n..][..n];
        for (i, v) in dst.iter_mut().enumerate() {
            *v = src[i * dk + d];
        }
    }
}

/// Softmax-normalised attention row `i` written into `p`.
fn attention_row(qt: &[f64], kt: &[f64], i: usize, n: usize, dk: usize, scale: f64, p: &mut [f64]) {
    let qi = &qt[i * dk..][..dk];
    let mut m = f64::NEG_INFINITY;
    for (j, pj) in p.iter_mut().enumerate() {
        let kj = &kt[j * dk..][..dk];
        *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
        m = m.max(*pj);
    }
    let mut s = 0.0;
    for pj in p.iter_mut() {
        *pj = (*pj - m).exp();
        s += *pj;
    }
    p.iter_mut().for_each(|pj| *pj /= s);
    debug_assert_eq!(p.len(), n);
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    q.expect_same_shape("vanilla_sa", k)?;
    q.expect_same_shape("vanilla_sa", v)?;
    let (c, h, w) = q.chw()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::arg("vanilla_sa", format!("{c} channels not divisible by {heads} heads")));
    }
    Ok((c, h * w, c / heads))
}

/// Forward pass without recording; memory stays O(n) per head.
pub fn vanilla_sa_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, n, dk) = check(q, k, v, heads)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; q.numel()];
    let mut p = vec![0.0; n];
    for head in 0..heads {
        let qt = gather_head(q.data(), head, dk, n);
        let kt = gather_head(k.data(), head, dk, n);
        let vt = gather_head(v.data(), head, dk, n);
        let mut ot = vec![0.0; n * dk];
        for i in 0..n {
            attention_row(&qt, &kt, i, n, dk, scale, &mut p);
            let oi = &mut ot[i * dk..][..dk];
            for (j, &pj) in p.iter().enumerate() {
                for (o, &vv) in oi.iter_mut().zip(&vt[j * dk..][..dk]) {
                    *o += pj * vv;
                }
            }
        }
        scatter_head(&ot, head, dk, n, &mut out);
    }
    Tensor::new(q.shape().to_vec(), out)
}

/// `SoftMax(Q Kᵀ / sqrt(d_k)) V` per head over the `h·w` tokens, reshaped back
/// to `(c, h, w)`. Attention rows are recomputed in the backward pass.
pub fn vanilla_sa(g: &mut Graph, t: &QkvTriple, heads: usize) -> Result<Var> {
    let out = vanilla_sa_forward(g.value(t.q), g.value(t.k), g.value(t.v), heads)?;
    let (_, n, dk) = check(g.value(t.q), g.value(t.k), g.value(t.v), heads)?;
    let scale = 1.0 / (dk as f64).sqrt();
    g.record("vanilla_sa", out, &[t.q, t.k, t.v], move |ctx| {
        let (q, k, v) = (ctx.input(0), ctx.input(1), ctx.input(2));
        let mut dq = vec![0.0; q.numel()];
        let mut dk_all = vec![0.0; q.numel()];
        let mut dv = vec![0.0; q.numel()];
        let mut p = vec![0.0; n];
        let mut dp = vec![0.0; n];
        for head in 0..heads {
            let qt = gather_head(q.data(), head, dk, n);
            let kt = gather_head(k.data(), head, dk, n);
            let vt = gather_head(v.data(), head, dk, n);
            let got = gather_head(ctx.grad.data(), head, dk, n);
            let mut dqt = vec![0.0; n * dk];
            let mut dkt = vec![0.0; n * dk];
            let mut dvt = vec![0.0; n * dk];
            for i in 0..n {
                attention_row(&qt, &kt, i, n, dk, scale, &mut p);
                let gi = &got[i * dk..][..dk];
                let mut s = 0.0;
                for j in 0..n {
                    dp[j] = gi.iter().zip(&vt[j * dk..][..dk]).map(|(a, b)| a * b).sum();
                    s += p[j] * dp[j];
                }
                let qi = &qt[i * dk..][..dk];
                for j in 0..n {
                    let ds = p[j] * (dp[j] - s) * scale;
                    for d in 0..dk {
                        dqt[i * dk + d] += ds * kt[j * dk + d];
                        dkt[j * dk + d] += ds * qi[d];
                        dvt[j * dk + d] += p[j] * gi[d];
                    }
                }
            }
            scatter_head(&dqt, head, dk, n, &mut dq);
            scatter_head(&dkt, head, dk, n, &mut dk_all);
            scatter_head(&dvt, head, dk, n, &mut dv);
        }
        let shape = q.shape().to_vec();
        Ok(vec![
            Some(Tensor::new(shape.clone(), dq)?),
            Some(Tensor::new(shape.clone(), dk_all)?),
            Some(Tensor::new(shape, dv)?),
        ])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> QkvTriple {
        QkvTriple {
            q: g.input(q),
            k: g.input(k),
            v: g.input(v),
        }
    }

    #[test]
    fn single_token_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Tensor::randn([8, 1, 1], &mut rng);
        let mut g = Graph::new();
        let t = triple(&mut g, Tensor::randn([8, 1, 1], &mut rng), Tensor::randn([8, 1, 1], &mut rng), v.clone());
        let out = vanilla_sa(&mut g, &t, 4).unwrap();
        assert!(g.value(out).max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_queries_and_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor::randn([4, 2, 3], &mut rng);
        let mut g = Graph::new();
        let t = triple(&mut g, Tensor::full([4, 2, 3], 0.3), Tensor::full([4, 2, 3], -1.2), v.clone());
        let out = vanilla_sa(&mut g, &t, 2).unwrap();
        let out = g.value(out);
        for c in 0..4 {
            let mean = v.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.data()[c * 6 + i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut g = Graph::new();
        let t = triple(&mut g, Tensor::ones([6, 2, 2]), Tensor::ones([6, 2, 2]), Tensor::ones([6, 2, 2]));
        assert!(vanilla_sa(&mut g, &t, 4).is_err());
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn([4, 2, 3], &mut rng)).collect();
        let proj = Tensor::randn([4, 2, 3], &mut rng);
        let r = grad_check("vanilla_sa", &inputs, 1e-4, |g, xs| {
            let t = QkvTriple { q: xs[0], k: xs[1], v: xs[2] };
            let o = vanilla_sa(g, &t, 2)?;
            g.weighted_sum(o, &proj)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
