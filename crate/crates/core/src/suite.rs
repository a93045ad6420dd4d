//! Self-contained verification suites shared by the CLI and the acceptance
//! tests: finite-difference gradient checks for every differentiable stage,
//! the DAK kernel checks and the DAK/ELU-residual equivalence.

use serde::Serialize;

use crate::attention::{
    dak, hadamard_attention, mkoi, mkoi_decoupled, sgff, transformer_block, AttentionKernel, BlockParams, MkoiParams, SgffParams,
};
use crate::correlation::{build_gwc_volume, build_pyramid, pyramid_lookup, regularize_volume, soft_argmin_init, CorrelationVolume, RegularizerParams};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with_params, GradReport};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Conv3d};
use crate::ops::{ConvSpec, Unary};
use crate::refine::{lstm_update, sequence_loss, RecurrentState, UpdateConfig, UpdateParams};
use crate::seeded_rng;
use crate::tensor::Tensor;

/// Gradient checks of every differentiable stage, each on small random
/// inputs drawn from `seed`. Losses are random projections of the output so
/// that no gradient is structurally constant.
pub fn gradient_suite(tolerance: f64, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();

    let conv = Conv2d::new(ConvSpec::new(3, 4, 3).stride(2), &mut rng);
    let x = Tensor::randn([3, 5, 6], &mut rng);
    let proj = Tensor::randn([4, 3, 3], &mut rng);
    out.push(grad_check_with_params("conv2d", &conv, &[x], tolerance, |g, c, xs| {
        let y = c.forward(g, xs[0])?;
        g.weighted_sum(y, &proj)
    })?);

    let inputs = vec![
        Tensor::randn([5, 3, 4], &mut rng),
        Tensor::randn([5], &mut rng),
        Tensor::randn([5], &mut rng),
    ];
    let proj = Tensor::randn([5, 3, 4], &mut rng);
    out.push(grad_check("layer_norm", &inputs, tolerance, |g, xs| {
        let y = g.layer_norm(xs[0], xs[1], xs[2])?;
        g.weighted_sum(y, &proj)
    })?);

    let inputs = vec![Tensor::randn([6, 3, 4], &mut rng), Tensor::randn([6, 3, 4], &mut rng)];
    let proj = Tensor::randn([6, 3, 4], &mut rng);
    out.push(grad_check("hadamard_attention", &inputs, tolerance, |g, xs| {
        let a = hadamard_attention(g, xs[0], xs[1])?;
        g.weighted_sum(a, &proj)
    })?);

    // Keep samples off the kink at zero.
    let a = Tensor::randn([2, 3, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let proj = Tensor::randn([2, 3, 5], &mut rng);
    out.push(grad_check("dak", &[a], tolerance, |g, xs| {
        let y = dak(g, xs[0])?;
        g.weighted_sum(y, &proj)
    })?);

    let p = MkoiParams::new(4, AttentionKernel::Dak, &mut rng)?;
    let inputs = vec![Tensor::randn([4, 4, 4], &mut rng), Tensor::randn([4, 4, 4], &mut rng)];
    let proj = Tensor::randn([4, 4, 4], &mut rng);
    out.push(grad_check_with_params("mkoi", &p, &inputs, tolerance, |g, p, xs| {
        let y = mkoi(g, xs[0], xs[1], p)?;
        g.weighted_sum(y, &proj)
    })?);

    let p = SgffParams::new(4, &mut rng);
    let x = Tensor::randn([4, 3, 4], &mut rng);
    let proj = Tensor::randn([4, 3, 4], &mut rng);
    out.push(grad_check_with_params("sgff", &p, &[x], tolerance, |g, p, xs| {
        let y = sgff(g, xs[0], p)?;
        g.weighted_sum(y, &proj)
    })?);

    let p = BlockParams::new(4, AttentionKernel::Dak, &mut rng)?;
    let x = Tensor::randn([4, 4, 4], &mut rng);
    let proj = Tensor::randn([4, 4, 4], &mut rng);
    out.push(grad_check_with_params("transformer_block", &p, &[x], tolerance, |g, p, xs| {
        let y = transformer_block(g, xs[0], p)?;
        g.weighted_sum(y, &proj)
    })?);

    let mut p = RegularizerParams::new(2, 3, &mut rng);
    // The last layer starts at zero, which would hide the inner layers.
    p.convs[2] = Conv3d::new(ConvSpec::new(3, 2, 3), &mut rng);
    let inputs = vec![Tensor::randn([4, 3, 4], &mut rng), Tensor::randn([4, 3, 4], &mut rng)];
    let proj = Tensor::randn([2, 3, 3, 4], &mut rng);
    out.push(grad_check_with_params("build_gwc_volume+regularize_volume", &p, &inputs, tolerance, |g, p, xs| {
        let v = build_gwc_volume(g, xs[0], xs[1], 3, 2)?;
        let v = regularize_volume(g, v, p)?;
        g.weighted_sum(v.values, &proj)
    })?);

    let vol = Tensor::randn([2, 4, 2, 3], &mut rng);
    let proj = Tensor::randn([1, 2, 3], &mut rng);
    out.push(grad_check("soft_argmin_init", &[vol], tolerance, |g, xs| {
        let d = soft_argmin_init(g, CorrelationVolume { values: xs[0], max_disp: 4 })?;
        g.weighted_sum(d, &proj)
    })?);

    let vol = Tensor::randn([2, 6, 2, 3], &mut rng);
    // Fractional parts stay away from the interpolation kinks at integers.
    let disp = Tensor::from_fn([1, 2, 3], |i| 0.73 + 0.7 * i as f64);
    let proj = Tensor::randn([12, 2, 3], &mut rng);
    out.push(grad_check("pyramid_lookup", &[vol, disp], tolerance, |g, xs| {
        let pyr = build_pyramid(g, CorrelationVolume { values: xs[0], max_disp: 6 }, 2, 1)?;
        let y = pyramid_lookup(g, &pyr, xs[1])?;
        g.weighted_sum(y, &proj)
    })?);

    out.push(lstm_check(tolerance, &mut rng)?);
    out.push(loss_check(tolerance, &mut rng)?);
    Ok(out)
}

fn lstm_check(tolerance: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradReport> {
    let cfg = UpdateConfig {
        hidden_dims: vec![2, 2],
        context_dims: vec![2, 2],
        corr_channels: 2,
        motion_dim: 2,
        upsample_factor: 2,
    };
    let mut p = UpdateParams::new(cfg, rng)?;
    p.delta_head[1] = Conv2d::new(ConvSpec::new(2, 1, 3), rng);
    let (h, w) = (4, 4);
    let mut inputs = Vec::new();
    for l in 0..2 {
        inputs.push(Tensor::randn([2, h >> l, w >> l], rng).map(f64::tanh));
    }
    for _ in 0..2 {
        for l in 0..2 {
            inputs.push(Tensor::randn([2, h >> l, w >> l], rng));
        }
    }
    inputs.push(Tensor::randn([2, h, w], rng));
    inputs.push(Tensor::rand_uniform([1, h, w], 0.5, 3.5, rng));
    let probes: Vec<Tensor> = inputs[..4].iter().map(|t| Tensor::randn(t.shape(), rng)).collect();
    let dprobe = Tensor::randn([1, h, w], rng);
    grad_check_with_params("lstm_update", &p, &inputs, tolerance, |g, p, xs| {
        let state = RecurrentState {
            hidden: xs[0..2].to_vec(),
            cell: xs[2..4].to_vec(),
        };
        let (next, delta) = lstm_update(g, &state, &xs[4..6], xs[6], xs[7], p)?;
        let mut terms = vec![g.weighted_sum(delta, &dprobe)?];
        for (v, pr) in next.hidden.iter().chain(&next.cell).zip(&probes) {
            terms.push(g.weighted_sum(*v, pr)?);
        }
        g.add_n(&terms)
    })
}

fn loss_check(tolerance: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradReport> {
    let gt = Tensor::rand_uniform([1, 3, 4], 0.0, 4.0, rng);
    let valid = (0..12).map(|i| i % 5 != 0).collect();
    let gtm = DisparityMap::new(gt.clone().reshape([3, 4])?, valid)?;
    // Residuals between 0.1 and 2.3 px in both signs avoid the L1 kink at
    // zero and the smooth-L1 switch at 1.
    let mut shifted = |lo: f64| {
        let s = Tensor::rand_uniform([1, 3, 4], lo, lo + 0.8, rng);
        Tensor::from_fn([1, 3, 4], |i| gt.data()[i] + if i % 3 == 0 { -s.data()[i] } else { s.data()[i] })
    };
    let inputs = vec![shifted(0.1), shifted(1.2), shifted(1.5)];
    grad_check("sequence_loss", &inputs, tolerance, |g, xs| sequence_loss(g, &xs[1..], xs[0], &gtm, 0.9))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DakReport {
    pub samples: usize,
    pub positivity_violations: usize,
    pub value_at_zero: f64,
    pub left_derivative: f64,
    pub right_derivative: f64,
}

impl DakReport {
    pub fn passed(&self, derivative_tol: f64) -> bool {
        self.positivity_violations == 0
            && self.value_at_zero == 1.0
            && (self.left_derivative - 1.0).abs() <= derivative_tol
            && (self.right_derivative - 1.0).abs() <= derivative_tol
    }
}

/// Positivity on `samples` draws spread over `[-50, 50]`, the value at zero
/// and both one-sided derivatives at zero from second-order one-sided
/// differences.
pub fn dak_checks(samples: usize, seed: u64) -> Result<DakReport> {
    let mut rng = seeded_rng(seed);
    let xs = Tensor::rand_uniform([samples], -50.0, 50.0, &mut rng);
    let mut g = Graph::inference();
    let x = g.input(xs);
    let y = dak(&mut g, x)?;
    let positivity_violations = g.value(y).data().iter().filter(|&&v| !(v > 0.0)).count();
    let f = |x: f64| Unary::Dak.eval(x);
    let h = 1e-4;
    Ok(DakReport {
        samples,
        positivity_violations,
        value_at_zero: f(0.0),
        right_derivative: (-3.0 * f(0.0) + 4.0 * f(h) - f(2.0 * h)) / (2.0 * h),
        left_derivative: (3.0 * f(0.0) - 4.0 * f(-h) + f(-2.0 * h)) / (2.0 * h),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Largest `|dak(a)·v − (v + elu(a)·v)|` over all elements.
    pub pointwise_max_dev: f64,
    /// Largest deviation between MKOI in product form and in residual form.
    pub mkoi_max_dev: f64,
}

impl EquivalenceReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.pointwise_max_dev <= tol && self.mkoi_max_dev <= tol
    }
}

/// Compares the two forms of the kernel-value product on `trials` random
/// pairs, elementwise and through a freshly drawn MKOI.
pub fn equivalence_suite(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::arg("equivalence_suite", "trials must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let (mut pw, mut mk) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let a = Tensor::randn([8, 6, 6], &mut rng).map(|x| 3.0 * x);
        let v = Tensor::randn([8, 6, 6], &mut rng);
        let p = MkoiParams::new(8, AttentionKernel::Dak, &mut rng)?;
        let mut g = Graph::inference();
        let (av, vv) = (g.input(a), g.input(v));
        let lhs = product_form(&mut g, av, vv)?;
        let e = g.elu(av)?;
        let ev = g.mul(e, vv)?;
        let rhs = g.add(vv, ev)?;
        pw = pw.max(g.value(lhs).max_abs_diff(g.value(rhs))?);
        let x = mkoi(&mut g, av, vv, &p)?;
        let y = mkoi_decoupled(&mut g, av, vv, &p)?;
        mk = mk.max(g.value(x).max_abs_diff(g.value(y))?);
    }
    Ok(EquivalenceReport {
        trials,
        pointwise_max_dev: pw,
        mkoi_max_dev: mk,
    })
}

fn product_form(g: &mut Graph, a: Var, v: Var) -> Result<Var> {
    let k = dak(g, a)?;
    g.mul(k, v)
}
