//! Synthetic stereo data and its on-disk form.

mod pfm;
mod rds;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use rds::{
    apply_illposed_patch, gen_rds, gen_rds_with_field, occluded_in_row, random_disparity_field, sample_row, PatchKind,
    Rect, StereoSample,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
}

fn image_map(t: &Tensor) -> Result<DisparityMap> {
    DisparityMap::from_chw(t)
}

/// Writes `{left.pfm, right.pfm, disp.pfm, meta.json}` into `dir`.
pub fn save_sample(s: &StereoSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&image_map(&s.left)?, &dir.join("left.pfm"))?;
    write_pfm(&image_map(&s.right)?, &dir.join("right.pfm"))?;
    write_pfm(&s.gt_disp, &dir.join("disp.pfm"))?;
    let meta = SampleMeta {
        seed: s.seed,
        height: s.height(),
        width: s.width(),
        max_disp: s.max_disp,
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_sample(dir: &Path) -> Result<StereoSample> {
    let path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let image = |name: &str| -> Result<Tensor> {
        let m = read_pfm(&dir.join(name))?;
        if (m.height(), m.width()) != (meta.height, meta.width) || m.num_valid() != m.valid.len() {
            return Err(Error::Pfm(format!("{name} does not match meta.json")));
        }
        m.values.reshape([1, meta.height, meta.width])
    };
    let gt_disp = read_pfm(&dir.join("disp.pfm"))?;
    Ok(StereoSample {
        left: image("left.pfm")?,
        right: image("right.pfm")?,
        gt_disp,
        max_disp: meta.max_disp,
        seed: meta.seed,
    })
}

/// `n` samples with seeds `base_seed, base_seed + 1, …`.
pub fn gen_dataset(n: usize, h: usize, w: usize, max_disp: usize, base_seed: u64) -> Result<Vec<StereoSample>> {
    (0..n as u64).map(|i| gen_rds(h, w, max_disp, base_seed.wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_rds(8, 32, 8, 3).unwrap();
        // Images go through f32 on disk.
        let mut s32 = s.clone();
        for t in [&mut s32.left, &mut s32.right] {
            *t = t.map(|v| v as f32 as f64);
        }
        s32.gt_disp.values = s32.gt_disp.values.map(|v| v as f32 as f64);
        save_sample(&s, dir.path()).unwrap();
        let back = load_sample(dir.path()).unwrap();
        assert_eq!(back.left, s32.left);
        assert_eq!(back.right, s32.right);
        assert_eq!(back.gt_disp.valid, s.gt_disp.valid);
        assert_eq!(back.seed, 3);
        for p in ["left.pfm", "right.pfm", "disp.pfm", "meta.json"] {
            assert!(dir.path().join(p).exists());
        }
    }

    #[test]
    fn dataset_seeds_are_consecutive() {
        let ds = gen_dataset(3, 8, 32, 8, 10).unwrap();
        assert_eq!(ds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![10, 11, 12]);
        assert_eq!(ds[1], gen_rds(8, 32, 8, 11).unwrap());
    }
}
