//! Hadamard product self-attention (HPSA) and the transformer encoder built
//! from it.
//!
//! The attention map is the elementwise product of channel-normalised
//! queries and keys, so its cost is linear in the number of pixels. A dense
//! positive kernel turns it into weights, and the multi-kernel interaction
//! (MKOI) mixes those weights with values convolved at three receptive
//! fields before fusing back to `c` channels.

mod encoder;
mod vanilla;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::ops::{ConvSpec, Unary};
use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;

pub use encoder::{encoder_forward, encoder_forward_probed, EncoderConfig, EncoderParams, EncoderStage};
pub use vanilla::{vanilla_sa, vanilla_sa_forward};

/// Map from raw attention scores to weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    /// `a + 1` for `a >= 0`, `exp(a)` otherwise.
    #[default]
    Dak,
    /// Softmax over the spatial positions of each channel.
    Softmax,
}

/// Query, key and value maps, all `(c, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct QkvTriple {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Splits a 1×1 projection `c -> 3c` into (Q, K, V) in channel order.
pub fn project_qkv(g: &mut Graph, x: Var, proj: &Conv2d) -> Result<QkvTriple> {
    let c = g.shape(x)[0];
    let s = &proj.spec;
    if s.kernel_size != 1 || s.in_channels != c || s.out_channels != 3 * c {
        return Err(Error::shape(
            "project_qkv",
            format!("projection {}->{} k{} for {c} channels", s.in_channels, s.out_channels, s.kernel_size),
        ));
    }
    let y = proj.forward(g, x)?;
    let parts = g.split(y, &[c, c, c])?;
    Ok(QkvTriple {
        q: parts[0],
        k: parts[1],
        v: parts[2],
    })
}

/// `‖q‖₂ ⊙ ‖k‖₂` with normalisation along the channel axis at each pixel.
pub fn hadamard_attention(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    if g.shape(q) != g.shape(k) {
        return Err(Error::shape(
            "hadamard_attention",
            format!("{:?} vs {:?}", g.shape(q), g.shape(k)),
        ));
    }
    g.value(q).chw()?;
    let qn = g.l2_normalize(q, 0)?;
    let kn = g.l2_normalize(k, 0)?;
    g.mul(qn, kn)
}

pub fn dak(g: &mut Graph, a: Var) -> Result<Var> {
    g.unary(a, Unary::Dak)
}

/// Applies `kernel` to a `(c, h, w)` score map.
pub fn apply_kernel(g: &mut Graph, a: Var, kernel: AttentionKernel) -> Result<Var> {
    match kernel {
        AttentionKernel::Dak => dak(g, a),
        AttentionKernel::Softmax => {
            let shape = g.shape(a).to_vec();
            let (c, h, w) = g.value(a).chw()?;
            let flat = g.reshape(a, &[c, h * w])?;
            let s = g.softmax(flat, 1)?;
            g.reshape(s, &shape)
        }
    }
}

/// Channel widths of the three interaction groups: `(c, c/2, c/4)`.
pub fn mkoi_group_widths(c: usize) -> [usize; 3] {
    [c, c / 2, c / 4]
}

/// Kernel size of branch `m`: `2m + 3`.
pub fn mkoi_kernel_size(m: usize) -> usize {
    2 * m + 3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MkoiParams {
    pub channels: usize,
    pub kernel: AttentionKernel,
    /// 1×1, `c -> 7c/4`, applied to the attention map.
    pub expand: Conv2d,
    /// 3×3 / 5×5 / 7×7 convolutions of V to `c`, `c/2`, `c/4` channels.
    pub branches: Vec<Conv2d>,
    /// 1×1, `7c/4 -> c`.
    pub fuse: Conv2d,
}

impl MkoiParams {
    pub fn new<R: Rng + ?Sized>(c: usize, kernel: AttentionKernel, rng: &mut R) -> Result<Self> {
        if c == 0 || c % 4 != 0 {
            return Err(Error::arg("mkoi", format!("channel count {c} must be a positive multiple of 4")));
        }
        let wide = 7 * c / 4;
        let branches = mkoi_group_widths(c)
            .iter()
            .enumerate()
            .map(|(m, &width)| Conv2d::new(ConvSpec::new(c, width, mkoi_kernel_size(m)), rng))
            .collect();
        Ok(MkoiParams {
            channels: c,
            kernel,
            expand: Conv2d::new(ConvSpec::new(c, wide, 1), rng),
            branches,
            fuse: Conv2d::new(ConvSpec::new(wide, c, 1), rng),
        })
    }
}

impl Parameterized for MkoiParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.expand.visit(f);
        self.branches.visit(f);
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.expand.visit_mut(f);
        self.branches.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// How kernelised attention weights meet the convolved values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    /// `kernel(a) ⊙ v`
    Kernel,
    /// `v + elu(a) ⊙ v`, algebraically identical to the DAK product.
    EluResidual,
}

/// Collects the post-kernel attention map of every block it passes through.
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub maps: Vec<Tensor>,
}

pub fn mkoi(g: &mut Graph, a_pre: Var, v: Var, params: &MkoiParams) -> Result<Var> {
    mkoi_with(g, a_pre, v, params, Interaction::Kernel, None)
}

/// MKOI with the product replaced by its residual ELU form.
pub fn mkoi_decoupled(g: &mut Graph, a_pre: Var, v: Var, params: &MkoiParams) -> Result<Var> {
    mkoi_with(g, a_pre, v, params, Interaction::EluResidual, None)
}

pub fn mkoi_with(
    g: &mut Graph,
    a_pre: Var,
    v: Var,
    params: &MkoiParams,
    interaction: Interaction,
    probe: Option<&mut AttentionProbe>,
) -> Result<Var> {
    let c = params.channels;
    let (ca, h, w) = g.value(a_pre).chw()?;
    if ca != c || g.shape(v) != [c, h, w] {
        return Err(Error::shape(
            "mkoi",
            format!("attention {:?}, value {:?}, params for {c} channels", g.shape(a_pre), g.shape(v)),
        ));
    }
    if interaction == Interaction::EluResidual && params.kernel != AttentionKernel::Dak {
        return Err(Error::arg("mkoi", "the ELU residual form only exists for the DAK kernel"));
    }
    let widths = mkoi_group_widths(c);
    let expanded = params.expand.forward(g, a_pre)?;
    let groups = g.split(expanded, &widths)?;
    let mut products = Vec::with_capacity(3);
    let mut weights = Vec::with_capacity(3);
    for (m, &grp) in groups.iter().enumerate() {
        let vb = params.branches[m].forward(g, v)?;
        let p = match interaction {
            Interaction::Kernel => {
                let wgt = apply_kernel(g, grp, params.kernel)?;
                weights.push(wgt);
                g.mul(wgt, vb)?
            }
            Interaction::EluResidual => {
                let e = g.elu(grp)?;
                let ev = g.mul(e, vb)?;
                g.add(vb, ev)?
            }
        };
        products.push(p);
    }
    if let Some(probe) = probe {
        if !weights.is_empty() {
            let cat = g.concat(&weights)?;
            probe.maps.push(g.value(cat).clone());
        }
    }
    let cat = g.concat(&products)?;
    params.fuse.forward(g, cat)
}

/// `mkoi(hadamard_attention(q, k), v)`.
pub fn hpsa(g: &mut Graph, t: &QkvTriple, params: &MkoiParams) -> Result<Var> {
    hpsa_probed(g, t, params, None)
}

pub fn hpsa_probed(g: &mut Graph, t: &QkvTriple, params: &MkoiParams, probe: Option<&mut AttentionProbe>) -> Result<Var> {
    let a = hadamard_attention(g, t.q, t.k)?;
    mkoi_with(g, a, t.v, params, Interaction::Kernel, probe)
}

/// Gated feed-forward: `proj_out(gelu(gate(u)) ⊙ value(u))` with `u = proj_in(x)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgffParams {
    pub proj_in: Conv2d,
    pub gate: Conv2d,
    pub value: Conv2d,
    pub proj_out: Conv2d,
}

impl SgffParams {
    pub fn new<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        SgffParams {
            proj_in: Conv2d::new(ConvSpec::new(c, c, 1), rng),
            gate: Conv2d::new(ConvSpec::new(c, c, 3), rng),
            value: Conv2d::new(ConvSpec::new(c, c, 3), rng),
            proj_out: Conv2d::new(ConvSpec::new(c, c, 1), rng),
        }
    }
}

impl Parameterized for SgffParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.proj_in.visit(f);
        self.gate.visit(f);
        self.value.visit(f);
        self.proj_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.proj_in.visit_mut(f);
        self.gate.visit_mut(f);
        self.value.visit_mut(f);
        self.proj_out.visit_mut(f);
    }
}

pub fn sgff(g: &mut Graph, x: Var, p: &SgffParams) -> Result<Var> {
    let u = p.proj_in.forward(g, x)?;
    let a = p.gate.forward(g, u)?;
    let b = p.value.forward(g, u)?;
    let ga = g.gelu(a)?;
    let gated = g.mul(ga, b)?;
    p.proj_out.forward(g, gated)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockParams {
    pub channels: usize,
    pub qkv: Conv2d,
    pub mkoi: MkoiParams,
    pub ln_gain: Param,
    pub ln_offset: Param,
    pub sgff: SgffParams,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(c: usize, kernel: AttentionKernel, rng: &mut R) -> Result<Self> {
        Ok(BlockParams {
            channels: c,
            qkv: Conv2d::new(ConvSpec::new(c, 3 * c, 1), rng),
            mkoi: MkoiParams::new(c, kernel, rng)?,
            ln_gain: Param::ones([c]),
            ln_offset: Param::zeros([c]),
            sgff: SgffParams::new(c, rng),
        })
    }

    /// Zeroes the last projection of both residual branches, making the
    /// block an exact identity.
    pub fn zero_output_projections(&mut self) {
        self.mkoi.fuse.zero_();
        self.sgff.proj_out.zero_();
    }
}

impl Parameterized for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.qkv.visit(f);
        self.mkoi.visit(f);
        f(&self.ln_gain);
        f(&self.ln_offset);
        self.sgff.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_mut(f);
        self.mkoi.visit_mut(f);
        f(&mut self.ln_gain);
        f(&mut self.ln_offset);
        self.sgff.visit_mut(f);
    }
}

/// `b = x + hpsa(qkv(x))`, then `b + sgff(ln(b))`.
pub fn transformer_block(g: &mut Graph, x: Var, p: &BlockParams) -> Result<Var> {
    transformer_block_probed(g, x, p, None)
}

pub fn transformer_block_probed(
    g: &mut Graph,
    x: Var,
    p: &BlockParams,
    probe: Option<&mut AttentionProbe>,
) -> Result<Var> {
    let t = project_qkv(g, x, &p.qkv)?;
    let att = hpsa_probed(g, &t, &p.mkoi, probe)?;
    let b = g.add(x, att)?;
    let gain = g.param(&p.ln_gain);
    let offset = g.param(&p.ln_offset);
    let n = g.layer_norm(b, gain, offset)?;
    let f = sgff(g, n, &p.sgff)?;
    g.add(b, f)
}

#[cfg(test)]
mod tests;
