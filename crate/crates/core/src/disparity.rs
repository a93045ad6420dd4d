use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disparity in pixels with a per-pixel validity mask, both `(h, w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityMap {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        if values.ndim() != 2 || valid.len() != values.numel() {
            return Err(Error::shape(
                "disparity_map",
                format!("values {:?} with {} mask entries", values.shape(), valid.len()),
            ));
        }
        if values.data().iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(Error::NonFinite { op: "disparity_map" });
        }
        Ok(DisparityMap { values, valid })
    }

    /// Every finite entry is valid.
    pub fn dense(values: Tensor) -> Result<Self> {
        let valid = values.data().iter().map(|v| v.is_finite()).collect();
        Self::new(values, valid)
    }

    /// Builds from a `(1, h, w)` map, all valid.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(Error::shape("disparity_map", format!("{c} channels")));
        }
        Self::dense(t.clone().reshape([h, w])?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(1, h, w)` view for use as a one-channel feature map. Invalid entries
    /// become zero.
    pub fn to_chw(&self) -> Tensor {
        let data = self
            .values
            .data()
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect();
        Tensor::new([1, self.height(), self.width()], data).expect("shape checked on construction")
    }
}
