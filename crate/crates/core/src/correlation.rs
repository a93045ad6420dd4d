//! Group-wise correlation volume, its 3-D regulariser, the soft-argmin
//! initial disparity and the multi-level lookup used by the recurrent update.
//!
//! Volumes are `(groups, disparities, h, w)` tensors living in a [`Graph`];
//! disparity maps are `(1, h, w)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv3d;
use crate::ops::ConvSpec;
use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CorrelationVolume {
    pub values: Var,
    /// Number of disparity bins at this resolution (stride 1).
    pub max_disp: usize,
}

#[derive(Clone, Debug)]
pub struct CorrPyramid {
    pub levels: Vec<CorrelationVolume>,
    pub lookup_radius: usize,
}

impl CorrPyramid {
    /// Channel count of [`pyramid_lookup`]'s output.
    pub fn feature_width(&self, groups: usize) -> usize {
        lookup_width(self.levels.len(), self.lookup_radius, groups)
    }
}

pub fn lookup_width(levels: usize, radius: usize, groups: usize) -> usize {
    levels * (2 * radius + 1) * groups
}

fn volume_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [g, d, h, w] => Ok((g, d, h, w)),
        ref s => Err(Error::shape(op, format!("expected (groups, disp, h, w), got {s:?}"))),
    }
}

fn disp_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected a (1, h, w) disparity map, got {s:?}"))),
    }
}

/// `v[g, d, y, x] = <f_l^g(y, x), f_r^g(y, x - d)> / (c / groups)`, zero where
/// `x - d < 0`.
pub fn build_gwc_volume(g: &mut Graph, fl: Var, fr: Var, max_disp: usize, n_groups: usize) -> Result<CorrelationVolume> {
    const OP: &str = "build_gwc_volume";
    g.value(fl).expect_same_shape(OP, g.value(fr))?;
    let (c, h, w) = g.value(fl).chw()?;
    if n_groups == 0 || c % n_groups != 0 {
        return Err(Error::arg(OP, format!("{n_groups} groups do not divide {c} channels")));
    }
    if max_disp == 0 || max_disp > w {
        return Err(Error::arg(OP, format!("max_disp {max_disp} must lie in 1..={w}")));
    }
    let (ng, nd) = (n_groups, max_disp);
    let gs = c / ng;
    let norm = 1.0 / gs as f64;
    let hw = h * w;
    let (l, r) = (g.value(fl).data(), g.value(fr).data());
    let mut out = vec![0.0; ng * nd * hw];
    for grp in 0..ng {
        for d in 0..nd {
            let dst = &mut out[(grp * nd + d) * hw..][..hw];
            for ch in grp * gs..(grp + 1) * gs {
                for y in 0..h {
                    let lrow = &l[ch * hw + y * w..][..w];
                    let rrow = &r[ch * hw + y * w..][..w];
                    let drow = &mut dst[y * w..][..w];
                    for x in d..w {
                        drow[x] += lrow[x] * rrow[x - d];
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
    }
    let values = g.record(OP, Tensor::new([ng, nd, h, w], out)?, &[fl, fr], move |ctx| {
        let (l, r) = (ctx.input(0).data(), ctx.input(1).data());
        let gv = ctx.grad.data();
        let mut dl = vec![0.0; c * hw];
        let mut dr = vec![0.0; c * hw];
        for grp in 0..ng {
            for d in 0..nd {
                let gsl = &gv[(grp * nd + d) * hw..][..hw];
                for ch in grp * gs..(grp + 1) * gs {
                    for y in 0..h {
                        let o = ch * hw + y * w;
                        for x in d..w {
                            let gg = gsl[y * w + x] * norm;
                            dl[o + x] += gg * r[o + x - d];
                            dr[o + x - d] += gg * l[o + x];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new([c, h, w], dl)?), Some(Tensor::new([c, h, w], dr)?)])
    })?;
    Ok(CorrelationVolume { values, max_disp })
}

/// Residual stack of three 3×3×3 convolutions over `(d, h, w)` with the
/// groups as channels. The last layer starts at zero so the stack begins as
/// the identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularizerParams {
    pub convs: Vec<Conv3d>,
}

impl RegularizerParams {
    pub fn new<R: Rng + ?Sized>(groups: usize, hidden: usize, rng: &mut R) -> Self {
        let mut last = Conv3d::new(ConvSpec::new(hidden, groups, 3), rng);
        last.zero_();
        RegularizerParams {
            convs: vec![
                Conv3d::new(ConvSpec::new(groups, hidden, 3), rng),
                Conv3d::new(ConvSpec::new(hidden, hidden, 3), rng),
                last,
            ],
        }
    }
}

impl Parameterized for RegularizerParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.visit_mut(f);
    }
}

pub fn regularize_volume(g: &mut Graph, vol: CorrelationVolume, p: &RegularizerParams) -> Result<CorrelationVolume> {
    let mut cur = vol.values;
    for (i, conv) in p.convs.iter().enumerate() {
        cur = conv.forward(g, cur)?;
        if i + 1 < p.convs.len() {
            cur = g.gelu(cur)?;
        }
    }
    let values = g.add(vol.values, cur)?;
    Ok(CorrelationVolume { values, ..vol })
}

/// `d0 = Σ_d d · softmax_d(mean over groups)`, returned as `(1, h, w)`.
pub fn soft_argmin_init(g: &mut Graph, vol: CorrelationVolume) -> Result<Var> {
    const OP: &str = "soft_argmin_init";
    let (ng, nd, h, w) = volume_dims(g.value(vol.values), OP)?;
    let hw = h * w;
    let probs = disparity_softmax(g.value(vol.values).data(), ng, nd, hw);
    let mut out = vec![0.0; hw];
    for d in 0..nd {
        for (o, p) in out.iter_mut().zip(&probs[d * hw..(d + 1) * hw]) {
            *o += d as f64 * p;
        }
    }
    let out_t = Tensor::new([1, h, w], out)?;
    g.record(OP, out_t, &[vol.values], move |ctx| {
        let probs = disparity_softmax(ctx.input(0).data(), ng, nd, hw);
        let (gv, d0) = (ctx.grad.data(), ctx.output.data());
        let mut dm = vec![0.0; nd * hw];
        for d in 0..nd {
            for p in 0..hw {
                dm[d * hw + p] = gv[p] * probs[d * hw + p] * (d as f64 - d0[p]) / ng as f64;
            }
        }
        let mut dv = Vec::with_capacity(ng * nd * hw);
        for _ in 0..ng {
            dv.extend_from_slice(&dm);
        }
        Ok(vec![Some(Tensor::new([ng, nd, h, w], dv)?)])
    })
}

/// Softmax over disparity of the group-averaged volume, laid out `(d, hw)`.
fn disparity_softmax(v: &[f64], ng: usize, nd: usize, hw: usize) -> Vec<f64> {
    let mut m = vec![0.0; nd * hw];
    for grp in 0..ng {
        for (a, b) in m.iter_mut().zip(&v[grp * nd * hw..(grp + 1) * nd * hw]) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= ng as f64);
    for p in 0..hw {
        let mx = (0..nd).map(|d| m[d * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for d in 0..nd {
            let e = (m[d * hw + p] - mx).exp();
            m[d * hw + p] = e;
            s += e;
        }
        for d in 0..nd {
            m[d * hw + p] /= s;
        }
    }
    m
}

/// Halves the disparity axis by averaging bin pairs; an odd trailing bin is
/// kept on its own, giving `ceil(d / 2)` bins.
pub fn pool_disparity(g: &mut Graph, vol: CorrelationVolume) -> Result<CorrelationVolume> {
    const OP: &str = "pool_disparity";
    let (ng, nd, h, w) = volume_dims(g.value(vol.values), OP)?;
    let no = nd.div_ceil(2);
    let hw = h * w;
    let span = move |j: usize| (2 * j, (2 * j + 2).min(nd));
    let v = g.value(vol.values).data();
    let mut out = vec![0.0; ng * no * hw];
    for grp in 0..ng {
        for j in 0..no {
            let (a, b) = span(j);
            let dst = &mut out[(grp * no + j) * hw..][..hw];
            for d in a..b {
                for (o, x) in dst.iter_mut().zip(&v[(grp * nd + d) * hw..][..hw]) {
                    *o += x / (b - a) as f64;
                }
            }
        }
    }
    let values = g.record(OP, Tensor::new([ng, no, h, w], out)?, &[vol.values], move |ctx| {
        let gv = ctx.grad.data();
        let mut dv = vec![0.0; ng * nd * hw];
        for grp in 0..ng {
            for j in 0..no {
                let (a, b) = span(j);
                let src = &gv[(grp * no + j) * hw..][..hw];
                for d in a..b {
                    for (o, x) in dv[(grp * nd + d) * hw..][..hw].iter_mut().zip(src) {
                        *o += x / (b - a) as f64;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new([ng, nd, h, w], dv)?)])
    })?;
    Ok(CorrelationVolume {
        values,
        max_disp: vol.max_disp.div_ceil(2),
    })
}

pub fn build_pyramid(g: &mut Graph, vol: CorrelationVolume, n_levels: usize, lookup_radius: usize) -> Result<CorrPyramid> {
    if n_levels == 0 {
        return Err(Error::arg("build_pyramid", "needs at least one level"));
    }
    let mut levels = vec![vol];
    for _ in 1..n_levels {
        let prev = *levels.last().unwrap();
        levels.push(pool_disparity(g, prev)?);
    }
    Ok(CorrPyramid { levels, lookup_radius })
}

/// Linear-interpolation weights of position `x` over bins `0..n`: the two
/// neighbouring indices with their weights, dropping any outside the range.
#[inline]
fn taps(x: f64, n: usize) -> [(Option<usize>, f64); 2] {
    let x0 = x.floor();
    let t = x - x0;
    let idx = |i: f64| (i >= 0.0 && i < n as f64).then_some(i as usize);
    [(idx(x0), 1.0 - t), (idx(x0 + 1.0), t)]
}

/// Samples each level at `disp / 2^l + o` for `o` in `-r..=r`. Output channels
/// are ordered level, then group, then offset.
pub fn pyramid_lookup(g: &mut Graph, pyr: &CorrPyramid, disp: Var) -> Result<Var> {
    const OP: &str = "pyramid_lookup";
    let (h, w) = disp_dims(g.value(disp), OP)?;
    let r = pyr.lookup_radius as isize;
    let k = 2 * pyr.lookup_radius + 1;
    let mut dims = Vec::with_capacity(pyr.levels.len());
    for lvl in &pyr.levels {
        let (ng, nd, vh, vw) = volume_dims(g.value(lvl.values), OP)?;
        if (vh, vw) != (h, w) || dims.first().is_some_and(|&(g0, _)| g0 != ng) {
            return Err(Error::shape(OP, format!("level ({ng}, {nd}, {vh}, {vw}) vs disparity {h}x{w}")));
        }
        dims.push((ng, nd));
    }
    let ng = dims[0].0;
    let hw = h * w;
    let n_out = dims.len() * ng * k;
    let dv = g.value(disp).data();
    let mut out = vec![0.0; n_out * hw];
    for (li, (lvl, &(_, nd))) in pyr.levels.iter().zip(&dims).enumerate() {
        let v = g.value(lvl.values).data();
        let scale = 0.5f64.powi(li as i32);
        for grp in 0..ng {
            let vg = &v[grp * nd * hw..][..nd * hw];
            for (oi, o) in (-r..=r).enumerate() {
                let dst = &mut out[((li * ng + grp) * k + oi) * hw..][..hw];
                for p in 0..hw {
                    let x = dv[p] * scale + o as f64;
                    dst[p] = taps(x, nd)
                        .iter()
                        .filter_map(|&(i, wt)| i.map(|i| wt * vg[i * hw + p]))
                        .sum();
                }
            }
        }
    }
    let mut parents: Vec<Var> = pyr.levels.iter().map(|l| l.values).collect();
    parents.push(disp);
    let nl = dims.len();
    g.record(OP, Tensor::new([n_out, h, w], out)?, &parents, move |ctx| {
        let gv = ctx.grad.data();
        let dv = ctx.input(nl).data();
        let mut ddisp = vec![0.0; hw];
        let mut grads = Vec::with_capacity(nl + 1);
        for (li, &(_, nd)) in dims.iter().enumerate() {
            let v = ctx.input(li).data();
            let scale = 0.5f64.powi(li as i32);
            let mut dvol = vec![0.0; ng * nd * hw];
            for grp in 0..ng {
                for (oi, o) in (-r..=r).enumerate() {
                    let src = &gv[((li * ng + grp) * k + oi) * hw..][..hw];
                    for p in 0..hw {
                        let x = dv[p] * scale + o as f64;
                        let [(i0, w0), (i1, w1)] = taps(x, nd);
                        let v0 = i0.map_or(0.0, |i| v[(grp * nd + i) * hw + p]);
                        let v1 = i1.map_or(0.0, |i| v[(grp * nd + i) * hw + p]);
                        ddisp[p] += src[p] * (v1 - v0) * scale;
                        if let Some(i) = i0 {
                            dvol[(grp * nd + i) * hw + p] += src[p] * w0;
                        }
                        if let Some(i) = i1 {
                            dvol[(grp * nd + i) * hw + p] += src[p] * w1;
                        }
                    }
                }
            }
            grads.push(ctx.needs(li).then(|| Tensor::new([ng, nd, h, w], dvol)).transpose()?);
        }
        grads.push(Some(Tensor::new([1, h, w], ddisp)?));
        Ok(grads)
    })
}
