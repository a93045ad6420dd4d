//! Random-dot stereo pairs with exact ground truth.
//!
//! The right view is uniform random texture. Each left pixel `(y, x)` samples
//! the right row at `x - d(y, x)` with linear interpolation, so on valid
//! pixels `left(y, x) == right(y, x - d)` holds exactly under the same
//! interpolation. Pixels whose source falls outside the image or is hidden
//! behind a nearer surface get fresh texture and are marked invalid.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoSample {
    /// `(1, h, w)`, values in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    pub gt_disp: DisparityMap,
    pub max_disp: usize,
    pub seed: u64,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt_disp.height()
    }

    pub fn width(&self) -> usize {
        self.gt_disp.width()
    }
}

/// Linear interpolation of `row` at `x`; `None` outside `[0, len - 1]`.
pub fn sample_row(row: &[f64], x: f64) -> Option<f64> {
    if !(x >= 0.0 && x <= (row.len() - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let t = x - x0 as f64;
    if t == 0.0 {
        return Some(row[x0]);
    }
    Some((1.0 - t) * row[x0] + t * row[x0 + 1])
}

/// Pixels of one row hidden in the right view: some pixel further right
/// lands at or left of this pixel's match, so it lies in front.
pub fn occluded_in_row(disp: &[f64]) -> Vec<bool> {
    let mut out = vec![false; disp.len()];
    let mut min_target = f64::INFINITY;
    for x in (0..disp.len()).rev() {
        let target = x as f64 - disp[x];
        out[x] = min_target <= target;
        min_target = min_target.min(target);
    }
    out
}

/// Smooth field: a random plane plus 2–4 Gaussian bumps, rescaled to
/// `[0.1, 0.9] · max_disp`.
pub fn random_disparity_field<R: Rng + ?Sized>(h: usize, w: usize, max_disp: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (gx, gy) = (normal.sample(rng), normal.sample(rng));
    let n_bumps = rng.gen_range(2..=4);
    let scale = h.min(w) as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(0.15..0.4) * scale;
            let amp = rng.gen_range(-1.5..1.5);
            (cy, cx, sigma, amp)
        })
        .collect();
    let raw = Tensor::from_fn([h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let plane = gx * x / w as f64 + gy * y / h as f64;
        let hills: f64 = bumps
            .iter()
            .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        plane + hills
    });
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let md = max_disp as f64;
    if hi - lo < 1e-12 {
        return Tensor::full([h, w], 0.5 * md);
    }
    raw.map(|v| md * (0.1 + 0.8 * (v - lo) / (hi - lo)))
}

fn check_size(h: usize, w: usize, max_disp: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::arg("gen_rds", format!("empty image {h}x{w}")));
    }
    if max_disp == 0 || 4 * max_disp > w {
        return Err(Error::arg("gen_rds", format!("max_disp {max_disp} must lie in 1..={}", w / 4)));
    }
    Ok(())
}

pub fn gen_rds(h: usize, w: usize, max_disp: usize, seed: u64) -> Result<StereoSample> {
    check_size(h, w, max_disp)?;
    let mut rng = seeded_rng(seed);
    let field = random_disparity_field(h, w, max_disp, &mut rng);
    render(field, max_disp, seed, &mut rng)
}

/// Like [`gen_rds`] with a caller-chosen field in `[0, max_disp]`.
pub fn gen_rds_with_field(field: &Tensor, max_disp: usize, seed: u64) -> Result<StereoSample> {
    let [h, w] = *field.shape() else {
        return Err(Error::shape("gen_rds", format!("field must be (h, w), got {:?}", field.shape())));
    };
    check_size(h, w, max_disp)?;
    if field.data().iter().any(|&d| !(0.0..=max_disp as f64).contains(&d)) {
        return Err(Error::arg("gen_rds", format!("field values must lie in [0, {max_disp}]")));
    }
    render(field.clone(), max_disp, seed, &mut seeded_rng(seed))
}

fn render<R: Rng + ?Sized>(field: Tensor, max_disp: usize, seed: u64, rng: &mut R) -> Result<StereoSample> {
    let [h, w] = *field.shape() else { unreachable!() };
    let right = Tensor::rand_uniform([1, h, w], 0.0, 1.0, rng);
    let mut left = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        let drow = &field.data()[y * w..(y + 1) * w];
        let rrow = &right.data()[y * w..(y + 1) * w];
        let occ = occluded_in_row(drow);
        for x in 0..w {
            let i = y * w + x;
            match sample_row(rrow, x as f64 - drow[x]) {
                Some(v) if !occ[x] => {
                    left[i] = v;
                    valid[i] = true;
                }
                _ => left[i] = rng.gen_range(0.0..1.0),
            }
        }
    }
    Ok(StereoSample {
        left: Tensor::new([1, h, w], left)?,
        right,
        gt_disp: DisparityMap::new(field, valid)?,
        max_disp,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    /// Both views flattened to their own mean inside the rectangle.
    Textureless,
    /// A bright saturating gradient painted on the left view only.
    Specular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Degrades `rect` of both views (textureless) or of the left view
/// (specular). Ground truth is untouched.
pub fn apply_illposed_patch(s: &StereoSample, kind: PatchKind, rect: Rect, seed: u64) -> Result<StereoSample> {
    let (h, w) = (s.height(), s.width());
    if rect.y + rect.h > h || rect.x + rect.w > w {
        return Err(Error::arg("apply_illposed_patch", format!("{rect:?} exceeds {h}x{w}")));
    }
    let mut out = s.clone();
    if rect.h == 0 || rect.w == 0 {
        return Ok(out);
    }
    let idx = move |r: usize, c: usize| (rect.y + r) * w + rect.x + c;
    let cells = move || (0..rect.h).flat_map(move |r| (0..rect.w).map(move |c| (r, c)));
    match kind {
        PatchKind::Textureless => {
            for img in [&mut out.left, &mut out.right] {
                let mean = cells().map(|(r, c)| img.data()[idx(r, c)]).sum::<f64>() / (rect.h * rect.w) as f64;
                for (r, c) in cells() {
                    img.data_mut()[idx(r, c)] = mean;
                }
            }
        }
        PatchKind::Specular => {
            let mut rng = seeded_rng(seed);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin(), theta.cos());
            let span = (rect.h.max(rect.w)) as f64;
            for (r, c) in cells() {
                let u = 0.5 + (dy * (r as f64 - rect.h as f64 / 2.0) + dx * (c as f64 - rect.w as f64 / 2.0)) / span;
                out.left.data_mut()[idx(r, c)] = (0.7 + 0.6 * u).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn max_warp_error(s: &StereoSample) -> f64 {
        let (h, w) = (s.height(), s.width());
        let mut worst: f64 = 0.0;
        for y in 0..h {
            let rrow = &s.right.data()[y * w..(y + 1) * w];
            for x in 0..w {
                let i = y * w + x;
                if s.gt_disp.valid[i] {
                    let r = sample_row(rrow, x as f64 - s.gt_disp.values.data()[i]).unwrap();
                    worst = worst.max((s.left.data()[i] - r).abs());
                }
            }
        }
        worst
    }

    /// Per-ray depth test against the surface seen by the right camera: the
    /// left row is a piecewise-linear surface, and each front-facing segment
    /// `[k, k + 1]` covers right-view positions `[t(k), t(k + 1)]` with
    /// `t(s) = s - d(s)`. Pixel `x` is hidden when some segment covering
    /// `t(x)` is strictly nearer (larger disparity) there.
    fn zbuffer_hidden(drow: &[f64]) -> Vec<bool> {
        let t = |s: usize| s as f64 - drow[s];
        (0..drow.len())
            .map(|x| {
                (0..drow.len().saturating_sub(1)).any(|k| {
                    let (t0, t1) = (t(k), t(k + 1));
                    if t1 <= t0 || t(x) < t0 || t(x) > t1 {
                        return false;
                    }
                    let a = (t(x) - t0) / (t1 - t0);
                    drow[k] + a * (drow[k + 1] - drow[k]) > drow[x] + 1e-9
                })
            })
            .collect()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(gen_rds(16, 64, 16, 9).unwrap(), gen_rds(16, 64, 16, 9).unwrap());
        assert_ne!(gen_rds(16, 64, 16, 9).unwrap(), gen_rds(16, 64, 16, 10).unwrap());
    }

    #[test]
    fn warp_consistency_is_exact() {
        for seed in 0..10 {
            let s = gen_rds(24, 96, 24, seed).unwrap();
            assert_eq!(max_warp_error(&s), 0.0);
            assert!(s.gt_disp.num_valid() > s.gt_disp.valid.len() / 2);
        }
    }

    #[test]
    fn disparity_stays_in_range() {
        let s = gen_rds(32, 128, 32, 3).unwrap();
        assert!(s.gt_disp.values.data().iter().all(|&d| (0.0..=32.0).contains(&d)));
        assert!(s.left.data().iter().chain(s.right.data()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_field_is_an_exact_shift() {
        let c = 5;
        let s = gen_rds_with_field(&Tensor::full([8, 40], c as f64), 10, 4).unwrap();
        for y in 0..8 {
            for x in 0..40 {
                let i = y * 40 + x;
                assert_eq!(s.gt_disp.valid[i], x >= c);
                if x >= c {
                    assert_eq!(s.left.data()[i], s.right.data()[i - c]);
                }
            }
        }
    }

    #[test]
    fn rejects_large_disparity() {
        assert!(gen_rds(8, 40, 11, 0).is_err());
        assert!(gen_rds(8, 40, 10, 0).is_ok());
        assert!(gen_rds(8, 40, 0, 0).is_err());
        assert!(gen_rds_with_field(&Tensor::full([2, 40], 11.0), 10, 0).is_err());
    }

    #[test]
    fn every_z_buffer_occlusion_is_marked() {
        let mut rng = seeded_rng(5);
        let mut hidden = 0;
        for _ in 0..500 {
            let w = rng.gen_range(2..12);
            let drow: Vec<f64> = (0..w).map(|_| rng.gen_range(0.0..4.0)).collect();
            let marked = occluded_in_row(&drow);
            for (x, z) in zbuffer_hidden(&drow).into_iter().enumerate() {
                hidden += usize::from(z);
                assert!(!z || marked[x], "row {drow:?}, pixel {x}");
            }
        }
        assert!(hidden > 100);
        for seed in 0..5 {
            let s = gen_rds(6, 24, 6, seed).unwrap();
            for y in 0..6 {
                let drow = &s.gt_disp.values.data()[y * 24..(y + 1) * 24];
                for (x, z) in zbuffer_hidden(drow).into_iter().enumerate() {
                    let out_of_view = (x as f64) < drow[x];
                    if z || out_of_view {
                        assert!(!s.gt_disp.valid[y * 24 + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn step_edge_occludes_background() {
        // Foreground at d=4 from x=6 hides background pixels 2..6 at d=0.
        let drow: Vec<f64> = (0..12).map(|x| if x >= 6 { 4.0 } else { 0.0 }).collect();
        let occ = occluded_in_row(&drow);
        assert_eq!(occ, (0..12).map(|x| (2..6).contains(&x)).collect::<Vec<_>>());
    }

    #[test]
    fn zero_area_patch_is_a_no_op() {
        let s = gen_rds(8, 32, 8, 1).unwrap();
        for kind in [PatchKind::Textureless, PatchKind::Specular] {
            let r = Rect { y: 2, x: 3, h: 0, w: 5 };
            assert_eq!(apply_illposed_patch(&s, kind, r, 0).unwrap(), s);
        }
    }

    #[test]
    fn full_textureless_patch_flattens_both_views() {
        let s = gen_rds(8, 32, 8, 2).unwrap();
        let r = Rect { y: 0, x: 0, h: 8, w: 32 };
        let t = apply_illposed_patch(&s, PatchKind::Textureless, r, 0).unwrap();
        for img in [&t.left, &t.right] {
            let v0 = img.data()[0];
            assert!(img.data().iter().all(|&v| v == v0));
        }
        assert_eq!(t.gt_disp, s.gt_disp);
    }

    #[test]
    fn specular_patch_breaks_photoconsistency_only_inside() {
        let s = gen_rds(16, 64, 16, 3).unwrap();
        let r = Rect { y: 4, x: 30, h: 8, w: 12 };
        let t = apply_illposed_patch(&s, PatchKind::Specular, r, 7).unwrap();
        assert_eq!(t.gt_disp, s.gt_disp);
        assert_eq!(t.right, s.right);
        let w = 64;
        let mut broken = 0;
        for y in 0..16 {
            let rrow = &t.right.data()[y * w..(y + 1) * w];
            for x in 0..w {
                let i = y * w + x;
                if !t.gt_disp.valid[i] {
                    continue;
                }
                let err = (t.left.data()[i] - sample_row(rrow, x as f64 - t.gt_disp.values.data()[i]).unwrap()).abs();
                let inside = (4..12).contains(&y) && (30..42).contains(&x);
                if inside {
                    broken += usize::from(err > 1e-6);
                } else {
                    assert_eq!(err, 0.0);
                }
            }
        }
        assert!(broken > 80, "only {broken} inconsistent pixels");
    }

    #[test]
    fn patch_outside_image_is_rejected() {
        let s = gen_rds(8, 32, 8, 4).unwrap();
        let r = Rect { y: 6, x: 0, h: 3, w: 2 };
        assert!(apply_illposed_patch(&s, PatchKind::Textureless, r, 0).is_err());
    }

    proptest! {
        #[test]
        fn generator_is_pure_in_seed(seed in any::<u64>()) {
            let a = gen_rds(8, 32, 8, seed).unwrap();
            prop_assert_eq!(&a, &gen_rds(8, 32, 8, seed).unwrap());
            prop_assert_eq!(max_warp_error(&a), 0.0);
        }
    }
}
