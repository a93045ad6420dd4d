//! Disparity error metrics and the numerical-rank study of attention maps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_kernel, hadamard_attention, AttentionKernel};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seeded_rng;
use crate::tensor::Tensor;

/// Singular values at or below `σ_max · RANK_RTOL` count as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Absolute errors over pixels valid in both maps.
fn valid_errors(pred: &DisparityMap, gt: &DisparityMap) -> Result<Vec<(f64, f64)>> {
    if pred.values.shape() != gt.values.shape() {
        return Err(Error::shape(
            "metric",
            format!("{:?} vs {:?}", pred.values.shape(), gt.values.shape()),
        ));
    }
    let errs: Vec<(f64, f64)> = pred
        .values
        .data()
        .iter()
        .zip(gt.values.data())
        .zip(pred.valid.iter().zip(&gt.valid))
        .filter(|(_, (&a, &b))| a && b)
        .map(|((&p, &g), _)| ((p - g).abs(), g))
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(errs)
}

/// Mean absolute disparity error.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let errs = valid_errors(pred, gt)?;
    Ok(errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64)
}

/// Percentage of pixels whose error exceeds both `px_thresh` and
/// `rel_thresh · gt`. `rel_thresh = 0` gives a pure pixel threshold.
pub fn d1_rate(pred: &DisparityMap, gt: &DisparityMap, px_thresh: f64, rel_thresh: f64) -> Result<f64> {
    let errs = valid_errors(pred, gt)?;
    let bad = errs
        .iter()
        .filter(|&&(e, g)| e > px_thresh && e > rel_thresh * g.abs())
        .count();
    Ok(100.0 * bad as f64 / errs.len() as f64)
}

/// KITTI convention: more than 3 px and more than 5 %.
pub fn d1_kitti(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    d1_rate(pred, gt, 3.0, 0.05)
}

pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let [m, n] = *a.shape() else {
        return Err(Error::shape("rank_ratio", format!("expected a matrix, got {:?}", a.shape())));
    };
    let mat = DMatrix::from_row_slice(m, n, a.data());
    Ok(mat.singular_values().iter().copied().collect())
}

/// Numerical rank divided by the number of rows.
pub fn rank_ratio(a: &Tensor) -> Result<f64> {
    let sv = singular_values(a)?;
    let m = a.shape()[0];
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > smax * RANK_RTOL).count();
    Ok(rank as f64 / m as f64)
}

/// Factors `n` as `h × w` with `h` the largest divisor not above `sqrt(n)`.
pub fn near_square(n: usize) -> (usize, usize) {
    let h = (1..=n.isqrt()).rev().find(|d| n % d == 0).unwrap_or(1);
    (h, n / h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub kernel: AttentionKernel,
    pub trials: usize,
    pub c: usize,
    pub n: usize,
    pub seed: u64,
    pub mean_rank_ratio: f64,
    pub min_rank_ratio: f64,
    /// Trials whose map had full row rank.
    pub full_rank_trials: usize,
    pub sv_threshold_policy: String,
}

/// The `c × n` post-kernel attention map for one `(q, k)` draw.
pub fn attention_matrix(q: &Tensor, k: &Tensor, kernel: AttentionKernel) -> Result<Tensor> {
    let (c, h, w) = q.chw()?;
    let mut g = Graph::inference();
    let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
    let a = hadamard_attention(&mut g, qv, kv)?;
    let a = apply_kernel(&mut g, a, kernel)?;
    g.value(a).clone().reshape([c, h * w])
}

/// Mean rank ratio of kernelised Hadamard attention maps over `trials`
/// Gaussian draws of `Q, K ∈ R^{c × n}`.
pub fn rank_experiment(kernel: AttentionKernel, trials: usize, c: usize, n: usize, seed: u64) -> Result<RankReport> {
    if trials == 0 || c == 0 || n == 0 {
        return Err(Error::arg("rank_experiment", "trials, c and n must be positive"));
    }
    let (h, w) = near_square(n);
    let mut rng = seeded_rng(seed);
    let mut ratios = Vec::with_capacity(trials);
    for _ in 0..trials {
        let q = Tensor::randn([c, h, w], &mut rng);
        let k = Tensor::randn([c, h, w], &mut rng);
        ratios.push(rank_ratio(&attention_matrix(&q, &k, kernel)?)?);
    }
    Ok(RankReport {
        kernel,
        trials,
        c,
        n,
        seed,
        mean_rank_ratio: ratios.iter().sum::<f64>() / trials as f64,
        min_rank_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        full_rank_trials: ratios.iter().filter(|&&r| r == 1.0).count(),
        sv_threshold_policy: format!("singular values > sigma_max * {RANK_RTOL:e} count toward the rank"),
    })
}
