//! Independent reference implementations used by unit tests.

use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Direct nested-loop convolution used as an independent reference.
pub fn naive_conv2d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (_, h, wd) = x.chw().unwrap();
    let (ho, wo) = (spec.out_extent(h), spec.out_extent(wd));
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = spec.kernel_size;
    let mut out = Tensor::zeros([spec.out_channels, ho, wo]);
    for o in 0..spec.out_channels {
        let gi = o / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[o, ci, ky, kx])
                                * x.at(&[gi * cin_g + ci, iy as usize, ix as usize]);
                        }
                    }
                }
                let off = out.offset(&[o, oy, ox]);
                out.data_mut()[off] = acc;
            }
        }
    }
    out
}


/// Channel-axis L2 normalisation with the same zero guard as the graph op.
pub fn l2_channels(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let m = h * w;
    let mut out = Tensor::zeros([c, h, w]);
    for p in 0..m {
        let n = (0..c).map(|k| x.data()[k * m + p].powi(2)).sum::<f64>().sqrt();
        if n >= crate::ops::L2_EPS {
            for k in 0..c {
                out.data_mut()[k * m + p] = x.data()[k * m + p] / n;
            }
        }
    }
    out
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).unwrap()
}

pub fn concat0(parts: &[Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect()).unwrap()
}
