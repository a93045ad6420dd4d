use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::ops::ConvSpec;
use crate::param::{Param, Parameterized};

use super::{transformer_block_probed, AttentionKernel, AttentionProbe, BlockParams};

/// Multi-scale layout: `(channels, downsample factor)` per scale, finest first.
/// Factors are relative to the encoder input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub scales: Vec<(usize, usize)>,
    pub blocks_per_scale: usize,
    #[serde(default)]
    pub kernel: AttentionKernel,
}

impl Default for EncoderConfig {
    /// Three scales at 1/4, 1/8 and 1/16 resolution, two blocks each.
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            scales: vec![(64, 4), (128, 8), (192, 16)],
            blocks_per_scale: 2,
            kernel: AttentionKernel::Dak,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("encoder: {d}")));
        if self.scales.is_empty() || self.blocks_per_scale == 0 || self.in_channels == 0 {
            return bad("needs at least one scale, one block and one input channel".into());
        }
        let mut prev = 1;
        for (i, &(c, f)) in self.scales.iter().enumerate() {
            if c == 0 || c % 4 != 0 {
                return bad(format!("scale {i} has {c} channels, not a positive multiple of 4"));
            }
            if f == 0 || f % prev != 0 || !(f / prev).is_power_of_two() {
                return bad(format!("factor {f} is not a power-of-two multiple of {prev}"));
            }
            if i > 0 && f <= prev {
                return bad(format!("factors must strictly increase, got {prev} then {f}"));
            }
            prev = f;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderStage {
    /// Stride-2 3×3 convs (one per halving), or a single stride-1 conv when
    /// only the width changes. Empty when the stage keeps its input as is.
    pub downsample: Vec<Conv2d>,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let (mut prev_c, mut prev_f) = (config.in_channels, 1);
        for &(c, f) in &config.scales {
            let halvings = (f / prev_f).trailing_zeros();
            let mut downsample = Vec::new();
            if halvings == 0 {
                if c != prev_c {
                    downsample.push(Conv2d::new(ConvSpec::new(prev_c, c, 3), rng));
                }
            } else {
                for i in 0..halvings {
                    let cin = if i == 0 { prev_c } else { c };
                    downsample.push(Conv2d::new(ConvSpec::new(cin, c, 3).stride(2), rng));
                }
            }
            let blocks = (0..config.blocks_per_scale)
                .map(|_| BlockParams::new(c, config.kernel, rng))
                .collect::<Result<_>>()?;
            stages.push(EncoderStage { downsample, blocks });
            (prev_c, prev_f) = (c, f);
        }
        Ok(EncoderParams { config, stages })
    }
}

impl Parameterized for EncoderStage {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.downsample.visit(f);
        self.blocks.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.downsample.visit_mut(f);
        self.blocks.visit_mut(f);
    }
}

impl Parameterized for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stages.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stages.visit_mut(f);
    }
}

/// One feature map per scale, finest first.
pub fn encoder_forward(g: &mut Graph, x: Var, params: &EncoderParams) -> Result<Vec<Var>> {
    encoder_forward_probed(g, x, params, None)
}

pub fn encoder_forward_probed(
    g: &mut Graph,
    x: Var,
    params: &EncoderParams,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<Vec<Var>> {
    let (c, h, w) = g.value(x).chw()?;
    let cfg = &params.config;
    if c != cfg.in_channels {
        return Err(Error::shape("encoder", format!("{c} input channels, expected {}", cfg.in_channels)));
    }
    for &(_, f) in &cfg.scales {
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape("encoder", format!("{h}x{w} input not divisible by factor {f}")));
        }
    }
    let mut cur = x;
    let mut outs = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        let last = stage.downsample.len().saturating_sub(1);
        for (i, conv) in stage.downsample.iter().enumerate() {
            cur = conv.forward(g, cur)?;
            if i < last {
                cur = g.gelu(cur)?;
            }
        }
        for block in &stage.blocks {
            cur = transformer_block_probed(g, cur, block, probe.as_deref_mut())?;
        }
        outs.push(cur);
    }
    Ok(outs)
}
