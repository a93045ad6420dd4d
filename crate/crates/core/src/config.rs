//! Run configuration as a single JSON document. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKernel, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub batch_size: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub max_lr: f64,
    pub train_steps: usize,
    pub train_iters: usize,
    pub eval_iters: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    /// Disparity field runs at `1 / 2^k` of the input resolution.
    pub disp_downsample_k: u32,
    pub n_hidden_levels: usize,
    /// Largest disparity at full resolution.
    pub max_disp: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Accepted for compatibility; all arithmetic is `f64`, so only `false`
    /// validates.
    pub mixed_precision: bool,
    /// Saturation jitter range. Recorded only; no colour augmentation runs.
    pub color_saturation: [f64; 2],

    pub encoder: EncoderConfig,
    pub corr_groups: usize,
    pub hidden_dim: usize,
    pub motion_dim: usize,
    /// Width of the 3-D regulariser's inner layers.
    pub reg_hidden: usize,
    pub gamma: f64,
    pub grad_clip: f64,
    /// Fraction of `train_steps` spent on linear warm-up.
    pub warmup_frac: f64,
    pub toy: ToyConfig,
}

/// Synthetic dataset sizes for `train-toy` and `eval`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Offset added to `seed` for the first validation sample, keeping the
    /// two splits disjoint.
    pub val_seed_offset: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_train: 200,
            n_val: 20,
            val_seed_offset: 1_000_000,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            batch_size: 8,
            crop_h: 320,
            crop_w: 720,
            max_lr: 2e-4,
            train_steps: 200_000,
            train_iters: 22,
            eval_iters: 32,
            corr_levels: 2,
            corr_radius: 4,
            disp_downsample_k: 2,
            n_hidden_levels: 3,
            max_disp: 192,
            weight_decay: 1e-5,
            seed: 666,
            mixed_precision: false,
            color_saturation: [0.0, 1.4],
            encoder: EncoderConfig::default(),
            corr_groups: 8,
            hidden_dim: 128,
            motion_dim: 128,
            reg_hidden: 8,
            gamma: 0.9,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            toy: ToyConfig::default(),
        }
    }
}

impl Config {
    /// Desk-scale setup: 64×128 one-channel random-dot pairs with disparities
    /// up to 32 px and a narrow one-block-per-scale encoder.
    pub fn toy() -> Self {
        Config {
            batch_size: 1,
            crop_h: 64,
            crop_w: 128,
            max_lr: 1e-3,
            train_steps: 2000,
            train_iters: 6,
            eval_iters: 6,
            max_disp: 32,
            encoder: EncoderConfig {
                in_channels: 1,
                scales: vec![(16, 4), (24, 8), (32, 16)],
                blocks_per_scale: 1,
                kernel: AttentionKernel::Dak,
            },
            corr_groups: 4,
            hidden_dim: 16,
            motion_dim: 16,
            reg_hidden: 4,
            warmup_frac: 0.05,
            ..Config::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Downsampling factor of the disparity field.
    pub fn field_factor(&self) -> usize {
        1 << self.disp_downsample_k
    }

    /// Disparity range of generated random-dot pairs: `max_disp`, capped at a
    /// quarter of the crop width so enough of every row stays visible.
    pub fn synthetic_max_disp(&self) -> usize {
        self.max_disp.min(self.crop_w / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("batch_size", self.batch_size),
            ("crop_h", self.crop_h),
            ("crop_w", self.crop_w),
            ("train_steps", self.train_steps),
            ("train_iters", self.train_iters),
            ("eval_iters", self.eval_iters),
            ("corr_levels", self.corr_levels),
            ("n_hidden_levels", self.n_hidden_levels),
            ("max_disp", self.max_disp),
            ("corr_groups", self.corr_groups),
            ("hidden_dim", self.hidden_dim),
            ("motion_dim", self.motion_dim),
            ("reg_hidden", self.reg_hidden),
            ("toy.n_train", self.toy.n_train),
            ("toy.n_val", self.toy.n_val),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        for (name, v) in [("max_lr", self.max_lr), ("grad_clip", self.grad_clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        let [lo, hi] = self.color_saturation;
        if !(0.0 <= lo && lo <= hi) {
            return bad(format!("color_saturation [{lo}, {hi}] is not an ordered non-negative range"));
        }
        if self.mixed_precision {
            return bad("mixed_precision is not supported: all arithmetic is f64".into());
        }
        self.encoder.validate()?;
        let f = self.field_factor();
        if self.encoder.scales.len() < self.n_hidden_levels {
            return bad(format!(
                "{} hidden levels need as many encoder scales, found {}",
                self.n_hidden_levels,
                self.encoder.scales.len()
            ));
        }
        for (l, &(c, factor)) in self.encoder.scales.iter().take(self.n_hidden_levels).enumerate() {
            if factor != f << l {
                return bad(format!("encoder scale {l} has factor {factor}, hidden level {l} needs {}", f << l));
            }
            if l == 0 && c % self.corr_groups != 0 {
                return bad(format!("{} correlation groups do not divide {c} feature channels", self.corr_groups));
            }
        }
        let coarsest = self.encoder.scales.last().map_or(1, |s| s.1);
        if self.crop_h % coarsest != 0 || self.crop_w % coarsest != 0 {
            return bad(format!("crop {}x{} not divisible by {coarsest}", self.crop_h, self.crop_w));
        }
        if self.max_disp % f != 0 || self.max_disp / f > self.crop_w / f {
            return bad(format!("max_disp {} must be a multiple of {f} within the crop width", self.max_disp));
        }
        Ok(())
    }
}
