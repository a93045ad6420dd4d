//! Multi-level convolutional LSTM that refines disparity by increments, the
//! learned ×4 convex upsampler and the sequence loss over all iterates.
//!
//! Disparity maps inside the graph are `(1, h, w)`. Hidden level `l` runs at
//! `1 / 2^l` of the disparity field resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{pyramid_lookup, CorrPyramid};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::ops::{ConvSpec, Unary};
use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;

/// Taps of the convex upsampler's 3×3 neighbourhood.
const NEIGHBOURS: usize = 9;
/// Scale applied to the mask logits before the softmax.
const MASK_SCALE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl RecurrentState {
    /// Zero cells with the given hidden maps.
    pub fn with_zero_cells(g: &mut Graph, hidden: Vec<Var>) -> Self {
        let cell = hidden.iter().map(|&h| g.constant(Tensor::zeros(g.shape(h).to_vec()))).collect();
        RecurrentState { hidden, cell }
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.hidden.len() != self.cell.len() || self.hidden.is_empty() {
            return Err(Error::shape(
                "recurrent_state",
                format!("{} hidden vs {} cell maps", self.hidden.len(), self.cell.len()),
            ));
        }
        for (&h, &c) in self.hidden.iter().zip(&self.cell) {
            if g.shape(h) != g.shape(c) {
                return Err(Error::shape("recurrent_state", format!("{:?} vs {:?}", g.shape(h), g.shape(c))));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// Hidden width per level, finest first.
    pub hidden_dims: Vec<usize>,
    /// Context width per level, finest first.
    pub context_dims: Vec<usize>,
    /// Channels of the correlation lookup features.
    pub corr_channels: usize,
    pub motion_dim: usize,
    /// Ratio between full resolution and the disparity field.
    pub upsample_factor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpdateParams {
    pub config: UpdateConfig,
    /// Two 3×3 convs on `[corr_feat, disp]`.
    pub motion: Vec<Conv2d>,
    /// One 3×3 conv per level producing `4 · hidden` gate logits (i, f, o, g).
    pub gates: Vec<Conv2d>,
    /// 3×3 then 3×3 to one channel; the last layer starts at zero.
    pub delta_head: Vec<Conv2d>,
    /// 3×3 then 1×1 to `9 · factor²` convex-combination logits.
    pub mask_head: Vec<Conv2d>,
}

impl UpdateParams {
    pub fn new<R: Rng + ?Sized>(config: UpdateConfig, rng: &mut R) -> Result<Self> {
        let levels = config.hidden_dims.len();
        if levels == 0 || config.context_dims.len() != levels {
            return Err(Error::Config(format!(
                "update operator: {levels} hidden levels vs {} context levels",
                config.context_dims.len()
            )));
        }
        if config.hidden_dims.iter().chain(&config.context_dims).any(|&d| d == 0)
            || config.motion_dim == 0
            || config.corr_channels == 0
            || config.upsample_factor == 0
        {
            return Err(Error::Config("update operator: widths must be positive".into()));
        }
        let hd = &config.hidden_dims;
        let md = config.motion_dim;
        let motion = vec![
            Conv2d::new(ConvSpec::new(config.corr_channels + 1, md, 3), rng),
            Conv2d::new(ConvSpec::new(md, md, 3), rng),
        ];
        let gates = (0..levels)
            .map(|l| {
                let mut cin = hd[l] + config.context_dims[l];
                cin += if l == 0 { md } else { hd[l - 1] };
                if l + 1 < levels {
                    cin += hd[l + 1];
                }
                Conv2d::new(ConvSpec::new(cin, 4 * hd[l], 3), rng)
            })
            .collect();
        let mut last = Conv2d::new(ConvSpec::new(hd[0], 1, 3), rng);
        last.zero_();
        let f2 = config.upsample_factor * config.upsample_factor;
        let delta_head = vec![Conv2d::new(ConvSpec::new(hd[0], hd[0], 3), rng), last];
        let mask_head = vec![
            Conv2d::new(ConvSpec::new(hd[0], 2 * hd[0], 3), rng),
            Conv2d::new(ConvSpec::new(2 * hd[0], NEIGHBOURS * f2, 1), rng),
        ];
        Ok(UpdateParams {
            config,
            motion,
            gates,
            delta_head,
            mask_head,
        })
    }
}

impl Parameterized for UpdateParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.motion.visit(f);
        self.gates.visit(f);
        self.delta_head.visit(f);
        self.mask_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.motion.visit_mut(f);
        self.gates.visit_mut(f);
        self.delta_head.visit_mut(f);
        self.mask_head.visit_mut(f);
    }
}

fn two_layer(g: &mut Graph, convs: &[Conv2d], x: Var, act_last: bool) -> Result<Var> {
    let a = convs[0].forward(g, x)?;
    let a = g.gelu(a)?;
    let b = convs[1].forward(g, a)?;
    if act_last {
        g.gelu(b)
    } else {
        Ok(b)
    }
}

/// One LSTM cell: gates from `input`, returns `(hidden, cell)`.
fn lstm_cell(g: &mut Graph, conv: &Conv2d, input: Var, cell: Var) -> Result<(Var, Var)> {
    let hid = g.shape(cell)[0];
    let logits = conv.forward(g, input)?;
    let parts = g.split(logits, &[hid; 4])?;
    let i = g.sigmoid(parts[0])?;
    let f = g.sigmoid(parts[1])?;
    let o = g.sigmoid(parts[2])?;
    let cand = g.tanh(parts[3])?;
    let keep = g.mul(f, cell)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Advances every hidden level once, coarsest first, and decodes a disparity
/// increment from the finest level.
pub fn lstm_update(
    g: &mut Graph,
    state: &RecurrentState,
    context: &[Var],
    corr_feat: Var,
    disp: Var,
    params: &UpdateParams,
) -> Result<(RecurrentState, Var)> {
    state.validate(g)?;
    let levels = state.hidden.len();
    if levels != params.gates.len() || context.len() != levels {
        return Err(Error::shape(
            "lstm_update",
            format!("{levels} state levels, {} context maps, {} gate convs", context.len(), params.gates.len()),
        ));
    }
    let (_, h, w) = g.value(state.hidden[0]).chw()?;
    if g.shape(disp) != [1, h, w] {
        return Err(Error::shape("lstm_update", format!("disparity {:?} vs field {h}x{w}", g.shape(disp))));
    }
    let mut hidden = state.hidden.clone();
    let mut cell = state.cell.clone();
    for l in (0..levels).rev() {
        let mut parts = vec![state.hidden[l], context[l]];
        if l == 0 {
            let mi = g.concat(&[corr_feat, disp])?;
            parts.push(two_layer(g, &params.motion, mi, true)?);
        } else {
            parts.push(g.avg_pool2(state.hidden[l - 1])?);
        }
        if l + 1 < levels {
            parts.push(g.upsample_nearest(hidden[l + 1], 2)?);
        }
        let input = g.concat(&parts)?;
        (hidden[l], cell[l]) = lstm_cell(g, &params.gates[l], input, state.cell[l])?;
    }
    let delta = two_layer(g, &params.delta_head, hidden[0], false)?;
    Ok((RecurrentState { hidden, cell }, delta))
}

/// Convex-combination logits for [`convex_upsample`], from the finest hidden map.
pub fn upsample_mask(g: &mut Graph, hidden: Var, params: &UpdateParams) -> Result<Var> {
    let m = two_layer(g, &params.mask_head, hidden, false)?;
    g.scale(m, MASK_SCALE)
}

fn neighbour(y: usize, x: usize, k: usize, h: usize, w: usize) -> Option<usize> {
    let yy = y as isize + (k / 3) as isize - 1;
    let xx = x as isize + (k % 3) as isize - 1;
    (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
}

/// Softmax weights over the 9 neighbours for sub-pixel `s` of coarse pixel `p`.
fn convex_weights(m: &[f64], s: usize, p: usize, f2: usize, hw: usize) -> [f64; NEIGHBOURS] {
    let mut wts = [0.0; NEIGHBOURS];
    let mut mx = f64::NEG_INFINITY;
    for (k, wk) in wts.iter_mut().enumerate() {
        *wk = m[(k * f2 + s) * hw + p];
        mx = mx.max(*wk);
    }
    let mut z = 0.0;
    for wk in wts.iter_mut() {
        *wk = (*wk - mx).exp();
        z += *wk;
    }
    wts.iter_mut().for_each(|wk| *wk /= z);
    wts
}

/// Upsamples a `(1, h, w)` disparity by `factor`: each fine pixel is a convex
/// combination of the 3×3 coarse neighbourhood (zero padded) scaled by
/// `factor`. `mask` is `(9 · factor², h, w)` with channel `k · factor² + sy · factor + sx`.
pub fn convex_upsample(g: &mut Graph, disp: Var, mask: Var, factor: usize) -> Result<Var> {
    const OP: &str = "convex_upsample";
    let (c, h, w) = g.value(disp).chw()?;
    let f2 = factor * factor;
    if c != 1 || factor == 0 || g.shape(mask) != [NEIGHBOURS * f2, h, w] {
        return Err(Error::shape(OP, format!("disparity {:?}, mask {:?}, factor {factor}", g.shape(disp), g.shape(mask))));
    }
    let hw = h * w;
    let (wo, scale) = (w * factor, factor as f64);
    let d = g.value(disp).data();
    let m = g.value(mask).data();
    let mut out = vec![0.0; hw * f2];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for s in 0..f2 {
                let wts = convex_weights(m, s, p, f2, hw);
                let v: f64 = (0..NEIGHBOURS)
                    .filter_map(|k| neighbour(y, x, k, h, w).map(|q| wts[k] * d[q]))
                    .sum();
                out[(y * factor + s / factor) * wo + x * factor + s % factor] = scale * v;
            }
        }
    }
    g.record(OP, Tensor::new([1, h * factor, wo], out)?, &[disp, mask], move |ctx| {
        let (d, m) = (ctx.input(0).data(), ctx.input(1).data());
        let gv = ctx.grad.data();
        let mut dd = vec![0.0; hw];
        let mut dm = vec![0.0; NEIGHBOURS * f2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for s in 0..f2 {
                    let go = scale * gv[(y * factor + s / factor) * wo + x * factor + s % factor];
                    let wts = convex_weights(m, s, p, f2, hw);
                    let vals: [f64; NEIGHBOURS] =
                        std::array::from_fn(|k| neighbour(y, x, k, h, w).map_or(0.0, |q| d[q]));
                    let mean: f64 = wts.iter().zip(&vals).map(|(a, b)| a * b).sum();
                    for k in 0..NEIGHBOURS {
                        if let Some(q) = neighbour(y, x, k, h, w) {
                            dd[q] += go * wts[k];
                        }
                        dm[(k * f2 + s) * hw + p] += go * wts[k] * (vals[k] - mean);
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new([1, h, w], dd)?),
            Some(Tensor::new([NEIGHBOURS * f2, h, w], dm)?),
        ])
    })
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    /// `d_1 … d_N` at field resolution.
    pub iterates: Vec<Var>,
    /// The same iterates convex-upsampled to full resolution.
    pub upsampled: Vec<Var>,
    pub state: RecurrentState,
}

/// `d_{i+1} = d_i + delta_i` for `n_iters` steps starting at `d0`. The
/// disparity fed to the lookup and the next step is detached, so gradients
/// reach earlier steps only through the recurrent state.
pub fn refine_disparity(
    g: &mut Graph,
    d0: Var,
    pyr: &CorrPyramid,
    context: &[Var],
    init: RecurrentState,
    n_iters: usize,
    params: &UpdateParams,
) -> Result<RefineOutput> {
    if n_iters == 0 {
        return Err(Error::arg("refine_disparity", "n_iters must be at least 1"));
    }
    let mut state = init;
    let mut disp = d0;
    let mut iterates = Vec::with_capacity(n_iters);
    let mut upsampled = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let base = g.detach(disp);
        let corr = pyramid_lookup(g, pyr, base)?;
        let (next, delta) = lstm_update(g, &state, context, corr, base, params)?;
        state = next;
        disp = g.add(base, delta)?;
        let mask = upsample_mask(g, state.hidden[0], params)?;
        upsampled.push(convex_upsample(g, disp, mask, params.config.upsample_factor)?);
        iterates.push(disp);
    }
    Ok(RefineOutput {
        iterates,
        upsampled,
        state,
    })
}

/// Weight of iterate `i` (1-based) among `n`: `gamma^(n - i)`.
pub fn iterate_weight(gamma: f64, i: usize, n: usize) -> f64 {
    gamma.powi((n - i) as i32)
}

/// `SmoothL1(d0 - gt) + Σ_i gamma^(N - i) · L1(d_i - gt)`, each term a mean
/// over the valid pixels of `gt`. Smooth L1 switches from quadratic to linear
/// at 1 px.
pub fn sequence_loss(g: &mut Graph, preds: &[Var], d0: Var, gt: &DisparityMap, gamma: f64) -> Result<Var> {
    const OP: &str = "sequence_loss";
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::arg(OP, format!("gamma {gamma} outside (0, 1]")));
    }
    if gt.num_valid() == 0 {
        return Err(Error::EmptyMask);
    }
    let shape = [1, gt.height(), gt.width()];
    for &p in preds.iter().chain(std::iter::once(&d0)) {
        if g.shape(p) != shape {
            return Err(Error::shape(OP, format!("prediction {:?} vs ground truth {shape:?}", g.shape(p))));
        }
    }
    let target = g.constant(gt.to_chw());
    let diff = g.sub(d0, target)?;
    let sl1 = g.unary(diff, Unary::SmoothL1 { beta: 1.0 })?;
    let mut terms = vec![g.masked_mean(sl1, &gt.valid)?];
    let n = preds.len();
    for (i, &p) in preds.iter().enumerate() {
        let diff = g.sub(p, target)?;
        let l1 = g.unary(diff, Unary::Abs)?;
        let m = g.masked_mean(l1, &gt.valid)?;
        terms.push(g.scale(m, iterate_weight(gamma, i + 1, n))?);
    }
    g.add_n(&terms)
}
