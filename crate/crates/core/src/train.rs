//! AdamW training of [`StereoModel`] on generated random-dot pairs, plus
//! validation metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{gen_dataset, StereoSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{d1_kitti, epe};
use crate::model::{ModelConfig, StereoModel};
use crate::param::Parameterized;
use crate::seeded_rng;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay. Moment buffers follow the model's
/// parameter visit order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update. `grads[i]` belongs to the i-th visited parameter.
    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &[Tensor], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            model.visit(&mut |p| {
                self.m.push(Tensor::zeros(p.value().shape()));
                self.v.push(Tensor::zeros(p.value().shape()));
            });
        }
        if grads.len() != self.m.len() {
            return Err(Error::arg("adamw", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut i = 0;
        let mut err = None;
        model.visit_mut(&mut |p| {
            let (m, v, gr) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            i += 1;
            if gr.shape() != p.value().shape() {
                err.get_or_insert_with(|| Error::shape("adamw", format!("{:?} vs {:?}", gr.shape(), p.value().shape())));
                return;
            }
            let w = p.value_mut().data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(gr.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (wd * *w + (*m / c1) / ((*v / c2).sqrt() + eps));
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Linear warm-up to `max_lr` over `warmup_frac · total` steps, then linear
/// decay to zero at `total`.
pub fn learning_rate(step: usize, total: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).round().max(1.0);
    let s = step as f64 + 1.0;
    if s <= warm {
        max_lr * s / warm
    } else {
        max_lr * ((total as f64 - s) / (total as f64 - warm)).max(0.0)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss and per-parameter gradients (visit order) of one sample.
pub fn sample_gradients(model: &StereoModel, s: &StereoSample, iters: usize, gamma: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, &s.left, &s.right, &s.gt_disp, iters, gamma)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let mut out = Vec::new();
    model.visit(&mut |p| {
        out.push(grads.param(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())));
    });
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub epe: f64,
    /// KITTI convention: error above 3 px and above 5 % of the true value.
    pub d1: f64,
}

/// Mean EPE and D1 over `samples`, each computed per image and then averaged.
pub fn evaluate(model: &StereoModel, samples: &[StereoSample], iters: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluate", "no samples"));
    }
    let (mut e, mut d) = (0.0, 0.0);
    for s in samples {
        let pred = model.predict(&s.left, &s.right, iters)?;
        e += epe(&pred, &s.gt_disp)?;
        d += d1_kitti(&pred, &s.gt_disp)?;
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        samples: samples.len(),
        epe: e / n,
        d1: d / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub kernel: String,
    pub steps: usize,
    /// Mean training loss over each block of `log_every` steps.
    pub loss_curve: Vec<f64>,
    pub val: EvalReport,
}

/// Training and validation sets of the toy setup. Training seeds start at
/// `cfg.seed`, validation seeds at `cfg.seed + toy.val_seed_offset`.
pub fn toy_datasets(cfg: &Config) -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    let train = gen_dataset(cfg.toy.n_train, cfg.crop_h, cfg.crop_w, cfg.synthetic_max_disp(), cfg.seed)?;
    let val = gen_dataset(cfg.toy.n_val, cfg.crop_h, cfg.crop_w, cfg.synthetic_max_disp(), cfg.seed + cfg.toy.val_seed_offset)?;
    Ok((train, val))
}

/// Trains a fresh model from `cfg.seed` on the toy data, calling `log` with
/// `(step, mean loss)` every `log_every` steps.
pub fn train_toy(cfg: &Config, log_every: usize, mut log: impl FnMut(usize, f64)) -> Result<(StereoModel, TrainReport)> {
    cfg.validate()?;
    let (train, val) = toy_datasets(cfg)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut model = StereoModel::new(ModelConfig::from_config(cfg), &mut rng)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let log_every = log_every.max(1);
    let (mut block_loss, mut curve) = (0.0, Vec::new());
    for step in 0..cfg.train_steps {
        let mut acc: Option<Vec<Tensor>> = None;
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (l, gr) = sample_gradients(&model, &train[order[cursor]], cfg.train_iters, cfg.gamma)?;
            cursor += 1;
            step_loss += l;
            match acc.as_mut() {
                None => acc = Some(gr),
                Some(a) => {
                    for (a, g) in a.iter_mut().zip(&gr) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = acc.expect("batch_size is positive");
        let inv = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model, &grads, learning_rate(step, cfg.train_steps, cfg.max_lr, cfg.warmup_frac))?;
        block_loss += step_loss * inv;
        if (step + 1) % log_every == 0 || step + 1 == cfg.train_steps {
            let n = (step % log_every + 1) as f64;
            curve.push(block_loss / n);
            log(step + 1, block_loss / n);
            block_loss = 0.0;
        }
    }
    let val = evaluate(&model, &val, cfg.eval_iters)?;
    let report = TrainReport {
        seed: cfg.seed,
        kernel: format!("{:?}", cfg.encoder.kernel).to_lowercase(),
        steps: cfg.train_steps,
        loss_curve: curve,
        val,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Param;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let lr = |s| learning_rate(s, 100, 1.0, 0.1);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!(lr(50) < 1.0 && lr(50) > lr(80));
        assert_eq!(lr(99), 0.0);
        assert!((0..100).all(|s| lr(s) >= 0.0 && lr(s) <= 1.0));
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 0.0]).unwrap(), Tensor::new([1], vec![4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 2.0), 1.0);
    }

    #[test]
    fn adamw_first_step_matches_hand_value() {
        // After one step the bias-corrected ratio m/√v is sign(g), so the
        // update is lr·(wd·w + sign(g)) up to eps.
        let mut p = Param::new(Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(0.1);
        opt.step(&mut p, &[Tensor::new([2], vec![0.5, -3.0]).unwrap()], 0.01).unwrap();
        let w = p.value().data();
        assert!((w[0] - (1.0 - 0.01 * (0.1 + 1.0))).abs() < 1e-9);
        assert!((w[1] - (-2.0 - 0.01 * (-0.2 - 1.0))).abs() < 1e-9);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut p = Param::new(Tensor::new([3], vec![2.0, -1.0, 0.5]).unwrap());
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let g = p.value().map(|w| 2.0 * (w - 0.3));
            opt.step(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p.value().data().iter().all(|w| (w - 0.3).abs() < 1e-3));
    }

    #[test]
    fn adamw_rejects_mismatched_gradients() {
        let mut p = Param::new(Tensor::zeros([2]));
        assert!(AdamW::new(0.0).step(&mut p, &[], 0.1).is_err());
        assert!(AdamW::new(0.0).step(&mut p, &[Tensor::zeros([3])], 0.1).is_err());
    }

    fn micro() -> Config {
        let mut c = Config::toy();
        c.crop_h = 32;
        c.crop_w = 64;
        c.max_disp = 16;
        c.encoder.scales = vec![(8, 4), (8, 8), (8, 16)];
        c.corr_groups = 2;
        c.hidden_dim = 4;
        c.motion_dim = 4;
        c.reg_hidden = 2;
        c.train_iters = 2;
        c.eval_iters = 2;
        c.batch_size = 1;
        c.train_steps = 3;
        c.toy.n_train = 2;
        c.toy.n_val = 2;
        c
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = micro();
        let (a, ra) = train_toy(&cfg, 1, |_, _| {}).unwrap();
        let (b, rb) = train_toy(&cfg, 1, |_, _| {}).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        assert_eq!(ra.val, rb.val);
        assert_eq!(ra.loss_curve.len(), 3);
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        a.visit(&mut |p| wa.extend_from_slice(p.value().data()));
        b.visit(&mut |p| wb.extend_from_slice(p.value().data()));
        assert_eq!(wa, wb);
    }

    #[test]
    fn validation_split_is_disjoint_from_training() {
        let (train, val) = toy_datasets(&micro()).unwrap();
        for v in &val {
            assert!(train.iter().all(|t| t.seed != v.seed && t.left != v.left));
        }
    }
}
