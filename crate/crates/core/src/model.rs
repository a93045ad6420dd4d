//! The full stereo matcher: shared attention encoder, group-wise correlation
//! volume with a light 3-D regulariser, soft-argmin initialisation and LSTM
//! refinement with convex upsampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_forward_probed, AttentionProbe, EncoderConfig, EncoderParams};
use crate::config::Config;
use crate::correlation::{build_gwc_volume, build_pyramid, lookup_width, regularize_volume, soft_argmin_init, RegularizerParams};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::ops::ConvSpec;
use crate::param::{Param, Parameterized};
use crate::refine::{refine_disparity, sequence_loss, RecurrentState, UpdateConfig, UpdateParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub corr_groups: usize,
    /// Full-resolution disparity range.
    pub max_disp: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    pub disp_downsample_k: u32,
    pub n_hidden_levels: usize,
    pub hidden_dim: usize,
    pub motion_dim: usize,
    pub reg_hidden: usize,
}

impl ModelConfig {
    pub fn from_config(c: &Config) -> Self {
        ModelConfig {
            encoder: c.encoder.clone(),
            corr_groups: c.corr_groups,
            max_disp: c.max_disp,
            corr_levels: c.corr_levels,
            corr_radius: c.corr_radius,
            disp_downsample_k: c.disp_downsample_k,
            n_hidden_levels: c.n_hidden_levels,
            hidden_dim: c.hidden_dim,
            motion_dim: c.motion_dim,
            reg_hidden: c.reg_hidden,
        }
    }

    pub fn field_factor(&self) -> usize {
        1 << self.disp_downsample_k
    }

    /// Disparity bins of the correlation volume.
    pub fn disp_bins(&self) -> usize {
        self.max_disp / self.field_factor()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StereoModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    /// Per hidden level: 3×3 conv from encoder features to `[hidden, context]`.
    pub context_init: Vec<Conv2d>,
    pub regularizer: RegularizerParams,
    pub update: UpdateParams,
}

impl Parameterized for StereoModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.context_init.visit(f);
        self.regularizer.visit(f);
        self.update.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.context_init.visit_mut(f);
        self.regularizer.visit_mut(f);
        self.update.visit_mut(f);
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Soft-argmin estimate at field resolution, `(1, h/f, w/f)`.
    pub d0: Var,
    /// `d0` upsampled to full resolution.
    pub d0_full: Var,
    pub iterates: Vec<Var>,
    /// Refined iterates at full resolution.
    pub preds_full: Vec<Var>,
}

impl StereoModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let f = config.field_factor();
        let levels = config.n_hidden_levels;
        if config.encoder.scales.len() < levels || levels == 0 {
            return Err(Error::Config(format!("{levels} hidden levels need as many encoder scales")));
        }
        for (l, &(_, factor)) in config.encoder.scales.iter().take(levels).enumerate() {
            if factor != f << l {
                return Err(Error::Config(format!("encoder scale {l} has factor {factor}, expected {}", f << l)));
            }
        }
        if config.disp_bins() == 0 || config.max_disp % f != 0 {
            return Err(Error::Config(format!("max_disp {} must be a positive multiple of {f}", config.max_disp)));
        }
        let encoder = EncoderParams::new(config.encoder.clone(), rng)?;
        let hd = config.hidden_dim;
        let context_init = config.encoder.scales[..levels]
            .iter()
            .map(|&(c, _)| Conv2d::new(ConvSpec::new(c, 2 * hd, 3), rng))
            .collect();
        let regularizer = RegularizerParams::new(config.corr_groups, config.reg_hidden, rng);
        let update = UpdateParams::new(
            UpdateConfig {
                hidden_dims: vec![hd; levels],
                context_dims: vec![hd; levels],
                corr_channels: lookup_width(config.corr_levels, config.corr_radius, config.corr_groups),
                motion_dim: config.motion_dim,
                upsample_factor: f,
            },
            rng,
        )?;
        Ok(StereoModel {
            config,
            encoder,
            context_init,
            regularizer,
            update,
        })
    }

    /// Repeats a one-channel image when the encoder expects more channels.
    fn prepare(&self, g: &mut Graph, img: &Tensor) -> Result<Var> {
        let (c, h, w) = img.chw()?;
        let want = self.config.encoder.in_channels;
        let t = if c == want {
            img.clone()
        } else if c == 1 {
            Tensor::new([want, h, w], img.data().repeat(want))?
        } else {
            return Err(Error::shape("stereo_model", format!("{c}-channel image for a {want}-channel encoder")));
        };
        Ok(g.constant(t))
    }

    pub fn forward(&self, g: &mut Graph, left: &Tensor, right: &Tensor, iters: usize) -> Result<ModelOutput> {
        self.forward_probed(g, left, right, iters, None)
    }

    pub fn forward_probed(
        &self,
        g: &mut Graph,
        left: &Tensor,
        right: &Tensor,
        iters: usize,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<ModelOutput> {
        if left.shape() != right.shape() {
            return Err(Error::shape("stereo_model", format!("{:?} vs {:?}", left.shape(), right.shape())));
        }
        let cfg = &self.config;
        let f = cfg.field_factor();
        let lv = self.prepare(g, left)?;
        let rv = self.prepare(g, right)?;
        let fl = encoder_forward_probed(g, lv, &self.encoder, probe.as_deref_mut())?;
        let fr = encoder_forward_probed(g, rv, &self.encoder, probe)?;
        let vol = build_gwc_volume(g, fl[0], fr[0], cfg.disp_bins(), cfg.corr_groups)?;
        let vol = regularize_volume(g, vol, &self.regularizer)?;
        let d0 = soft_argmin_init(g, vol)?;
        let pyr = build_pyramid(g, vol, cfg.corr_levels, cfg.corr_radius)?;
        let hd = cfg.hidden_dim;
        let mut hidden = Vec::with_capacity(cfg.n_hidden_levels);
        let mut context = Vec::with_capacity(cfg.n_hidden_levels);
        for (conv, &feat) in self.context_init.iter().zip(&fl) {
            let x = conv.forward(g, feat)?;
            let parts = g.split(x, &[hd, hd])?;
            hidden.push(g.tanh(parts[0])?);
            context.push(g.gelu(parts[1])?);
        }
        let init = RecurrentState::with_zero_cells(g, hidden);
        let out = refine_disparity(g, d0, &pyr, &context, init, iters, &self.update)?;
        let up = g.upsample_nearest(d0, f)?;
        let d0_full = g.scale(up, f as f64)?;
        Ok(ModelOutput {
            d0,
            d0_full,
            iterates: out.iterates,
            preds_full: out.upsampled,
        })
    }

    /// Training loss for one sample.
    pub fn loss(&self, g: &mut Graph, left: &Tensor, right: &Tensor, gt: &DisparityMap, iters: usize, gamma: f64) -> Result<Var> {
        let out = self.forward(g, left, right, iters)?;
        sequence_loss(g, &out.preds_full, out.d0_full, gt, gamma)
    }

    /// Final full-resolution prediction without recording gradients.
    pub fn predict(&self, left: &Tensor, right: &Tensor, iters: usize) -> Result<DisparityMap> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, left, right, iters)?;
        DisparityMap::from_chw(g.value(*out.preds_full.last().expect("at least one iterate")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_rds;
    use crate::seeded_rng;

    fn tiny() -> ModelConfig {
        let mut c = Config::toy();
        c.encoder.scales = vec![(8, 4), (8, 8), (8, 16)];
        c.corr_groups = 2;
        c.hidden_dim = 4;
        c.motion_dim = 4;
        c.reg_hidden = 2;
        c.max_disp = 16;
        ModelConfig::from_config(&c)
    }

    #[test]
    fn forward_shapes() {
        let m = StereoModel::new(tiny(), &mut seeded_rng(1)).unwrap();
        let s = gen_rds(32, 64, 16, 2).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &s.left, &s.right, 3).unwrap();
        assert_eq!(g.shape(out.d0), &[1, 8, 16]);
        assert_eq!(g.shape(out.d0_full), &[1, 32, 64]);
        assert_eq!(out.preds_full.len(), 3);
        assert_eq!(g.shape(out.preds_full[2]), &[1, 32, 64]);
        let d0 = g.value(out.d0);
        assert!(d0.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
    }

    #[test]
    fn fresh_model_does_not_move_d0() {
        let m = StereoModel::new(tiny(), &mut seeded_rng(3)).unwrap();
        let s = gen_rds(32, 64, 16, 4).unwrap();
        let mut g = Graph::inference();
        let out = m.forward(&mut g, &s.left, &s.right, 2).unwrap();
        for &d in &out.iterates {
            assert_eq!(g.value(d), g.value(out.d0));
        }
    }

    #[test]
    fn every_parameter_receives_a_gradient_path() {
        let m = StereoModel::new(tiny(), &mut seeded_rng(5)).unwrap();
        let s = gen_rds(32, 64, 16, 6).unwrap();
        let mut g = Graph::new();
        let loss = m.loss(&mut g, &s.left, &s.right, &s.gt_disp, 2, 0.9).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut missing = 0;
        m.visit(&mut |p| missing += usize::from(grads.param(p.id()).is_none()));
        assert_eq!(missing, 0);
    }

    #[test]
    fn save_and_load_reproduce_predictions() {
        let m = StereoModel::new(tiny(), &mut seeded_rng(7)).unwrap();
        let s = gen_rds(32, 64, 16, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = StereoModel::load(&path).unwrap();
        assert_eq!(back.num_params(), m.num_params());
        assert_eq!(m.predict(&s.left, &s.right, 2).unwrap(), back.predict(&s.left, &s.right, 2).unwrap());
    }

    #[test]
    fn one_small_step_lowers_the_loss_for_most_seeds() {
        let mut wins = 0;
        for seed in 0..10 {
            let mut m = StereoModel::new(tiny(), &mut seeded_rng(100 + seed)).unwrap();
            let s = gen_rds(32, 64, 16, 200 + seed).unwrap();
            let eval = |m: &StereoModel| {
                let mut g = Graph::new();
                let l = m.loss(&mut g, &s.left, &s.right, &s.gt_disp, 2, 0.9).unwrap();
                let v = g.value(l).item().unwrap();
                (v, g.backward(l).unwrap())
            };
            let (before, grads) = eval(&m);
            m.visit_mut(&mut |p| {
                let gp = grads.param(p.id()).unwrap().clone();
                let next = p.value().zip_map(&gp, |w, d| w - 1e-4 * d).unwrap();
                p.set(next);
            });
            let (after, _) = eval(&m);
            wins += usize::from(after < before);
        }
        assert!(wins > 5, "loss fell for only {wins} of 10 seeds");
    }

    #[test]
    fn three_channel_encoder_accepts_grey_input() {
        let mut c = tiny();
        c.encoder.in_channels = 3;
        let m = StereoModel::new(c, &mut seeded_rng(9)).unwrap();
        let s = gen_rds(32, 64, 16, 10).unwrap();
        assert!(m.predict(&s.left, &s.right, 1).is_ok());
    }
}
