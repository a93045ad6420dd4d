//! 2-D and 3-D convolutions lowered to GEMM through im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a convolution layer. Padding defaults to `(k - 1) / 2`, which
/// keeps the spatial size at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            padding: kernel_size.saturating_sub(1) / 2,
            stride: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::arg("conv", d));
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 || self.groups == 0 {
            return bad(format!("degenerate spec {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel_size) / self.stride + 1
    }

    pub fn weight_shape_2d(&self) -> [usize; 4] {
        let k = self.kernel_size;
        [self.out_channels, self.in_channels / self.groups, k, k]
    }

    pub fn weight_shape_3d(&self) -> [usize; 5] {
        let k = self.kernel_size;
        [self.out_channels, self.in_channels / self.groups, k, k, k]
    }

    /// Number of inputs feeding one output element.
    pub fn fan_in(&self, spatial_dims: u32) -> usize {
        self.in_channels / self.groups * self.kernel_size.pow(spatial_dims)
    }
}

/// `c <- a · b + beta · c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry shared by the 2-D and 3-D lowerings; 2-D uses `depth = 1`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    kd: usize,
    k: usize,
    pad_d: usize,
    pad: usize,
    stride: usize,
    din: usize,
    hin: usize,
    win: usize,
    dout: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kd * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.dout * self.hout * self.wout
    }

    fn in_len(&self) -> usize {
        self.din * self.hin * self.win
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1 && self.stride == 1 && self.pad == 0 && self.pad_d == 0
    }

    /// Input coordinate for output `o` and tap `t`, or `None` in the padding.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + t) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Lowers `channels` input planes into a `(channels * taps, out_len)` matrix.
    fn im2col(&self, x: &[f64], channels: usize, cols: &mut [f64]) {
        let n = self.out_len();
        let mut row = 0;
        for c in 0..channels {
            let plane = &x[c * self.in_len()..(c + 1) * self.in_len()];
            for td in 0..self.kd {
                for ty in 0..self.k {
                    for tx in 0..self.k {
                        let dst = &mut cols[row * n..(row + 1) * n];
                        let mut j = 0;
                        for od in 0..self.dout {
                            let id = Self::src(od, td, 1, self.pad_d, self.din);
                            for oy in 0..self.hout {
                                let iy = Self::src(oy, ty, self.stride, self.pad, self.hin);
                                match (id, iy) {
                                    (Some(id), Some(iy)) => {
                                        let src = &plane[(id * self.hin + iy) * self.win..][..self.win];
                                        for ox in 0..self.wout {
                                            dst[j] = match Self::src(ox, tx, self.stride, self.pad, self.win) {
                                                Some(ix) => src[ix],
                                                None => 0.0,
                                            };
                                            j += 1;
                                        }
                                    }
                                    _ => {
                                        dst[j..j + self.wout].iter_mut().for_each(|v| *v = 0.0);
                                        j += self.wout;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto `channels` input planes.
    fn col2im(&self, cols: &[f64], channels: usize, dx: &mut [f64]) {
        let n = self.out_len();
        let mut row = 0;
        for c in 0..channels {
            let plane = &mut dx[c * self.in_len()..(c + 1) * self.in_len()];
            for td in 0..self.kd {
                for ty in 0..self.k {
                    for tx in 0..self.k {
                        let src = &cols[row * n..(row + 1) * n];
                        let mut j = 0;
                        for od in 0..self.dout {
                            let id = Self::src(od, td, 1, self.pad_d, self.din);
                            for oy in 0..self.hout {
                                let iy = Self::src(oy, ty, self.stride, self.pad, self.hin);
                                if let (Some(id), Some(iy)) = (id, iy) {
                                    let dst = &mut plane[(id * self.hin + iy) * self.win..][..self.win];
                                    for ox in 0..self.wout {
                                        if let Some(ix) = Self::src(ox, tx, self.stride, self.pad, self.win) {
                                            dst[ix] += src[j];
                                        }
                                        j += 1;
                                    }
                                } else {
                                    j += self.wout;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn conv_forward(spec: &ConvSpec, geo: &Geometry, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let n = geo.out_len();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = cin_g * geo.taps();
    let mut out = vec![0.0; spec.out_channels * n];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kk * n] };
    for gi in 0..g {
        let xg = &x[gi * cin_g * geo.in_len()..(gi + 1) * cin_g * geo.in_len()];
        let colsref: &[f64] = if geo.is_pointwise() {
            xg
        } else {
            geo.im2col(xg, cin_g, &mut cols);
            &cols
        };
        let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
        gemm(
            cout_g,
            kk,
            n,
            wg,
            (kk, 1),
            colsref,
            (n, 1),
            0.0,
            &mut out[gi * cout_g * n..(gi + 1) * cout_g * n],
        );
    }
    if let Some(b) = b {
        for (o, &bo) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bo);
        }
    }
    out
}

struct ConvGrads {
    dx: Option<Vec<f64>>,
    dw: Option<Vec<f64>>,
    db: Option<Vec<f64>>,
}

fn conv_backward(
    spec: &ConvSpec,
    geo: &Geometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    (need_x, need_w, need_b): (bool, bool, bool),
) -> ConvGrads {
    let n = geo.out_len();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = cin_g * geo.taps();
    let mut dx = need_x.then(|| vec![0.0; spec.in_channels * geo.in_len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let db = need_b.then(|| {
        (0..spec.out_channels)
            .map(|o| dout[o * n..(o + 1) * n].iter().sum())
            .collect()
    });
    let pointwise = geo.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * n] };
    for gi in 0..g {
        let in_range = gi * cin_g * geo.in_len()..(gi + 1) * cin_g * geo.in_len();
        let dog = &dout[gi * cout_g * n..(gi + 1) * cout_g * n];
        let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
        if let Some(dw) = dw.as_mut() {
            let xg = &x[in_range.clone()];
            let colsref: &[f64] = if pointwise {
                xg
            } else {
                geo.im2col(xg, cin_g, &mut cols);
                &cols
            };
            // dW = dOut · colsᵀ
            gemm(
                cout_g,
                n,
                kk,
                dog,
                (n, 1),
                colsref,
                (1, n),
                0.0,
                &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk],
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxg = &mut dx[in_range];
            if pointwise {
                gemm(kk, cout_g, n, wg, (1, kk), dog, (n, 1), 0.0, dxg);
            } else {
                // dcols = Wᵀ · dOut
                gemm(kk, cout_g, n, wg, (1, kk), dog, (n, 1), 0.0, &mut cols);
                geo.col2im(&cols, cin_g, dxg);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn check_weights(op: &'static str, w: &Tensor, expected: &[usize], b: Option<&Tensor>, spec: &ConvSpec) -> Result<()> {
    if w.shape() != expected {
        return Err(Error::shape(op, format!("weights {:?}, expected {expected:?}", w.shape())));
    }
    match (b, spec.bias) {
        (Some(b), _) if b.shape() != [spec.out_channels] => Err(Error::shape(
            op,
            format!("bias {:?} for {} outputs", b.shape(), spec.out_channels),
        )),
        _ => Ok(()),
    }
}

impl Graph {
    /// 2-D convolution of a `(c, h, w)` map with zero padding.
    pub fn conv2d(&mut self, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        spec.validate()?;
        let (c, h, wd) = self.value(x).chw()?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        check_weights("conv2d", self.value(w), &spec.weight_shape_2d(), b.map(|b| self.value(b)), spec)?;
        if h + 2 * spec.padding < spec.kernel_size || wd + 2 * spec.padding < spec.kernel_size {
            return Err(Error::shape("conv2d", format!("{h}x{wd} input smaller than kernel")));
        }
        let geo = Geometry {
            kd: 1,
            k: spec.kernel_size,
            pad_d: 0,
            pad: spec.padding,
            stride: spec.stride,
            din: 1,
            hin: h,
            win: wd,
            dout: 1,
            hout: spec.out_extent(h),
            wout: spec.out_extent(wd),
        };
        self.conv_common("conv2d", x, *spec, geo, w, b, vec![spec.out_channels, geo.hout, geo.wout])
    }

    /// 3-D convolution of a `(c, d, h, w)` volume, stride 1, zero padding.
    pub fn conv3d(&mut self, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        spec.validate()?;
        if spec.stride != 1 {
            return Err(Error::arg("conv3d", "only stride 1 is supported"));
        }
        let [c, d, h, wd] = self.shape(x)[..] else {
            return Err(Error::shape("conv3d", format!("expected (c, d, h, w), got {:?}", self.shape(x))));
        };
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv3d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        check_weights("conv3d", self.value(w), &spec.weight_shape_3d(), b.map(|b| self.value(b)), spec)?;
        let geo = Geometry {
            kd: spec.kernel_size,
            k: spec.kernel_size,
            pad_d: spec.padding,
            pad: spec.padding,
            stride: 1,
            din: d,
            hin: h,
            win: wd,
            dout: spec.out_extent(d),
            hout: spec.out_extent(h),
            wout: spec.out_extent(wd),
        };
        self.conv_common(
            "conv3d",
            x,
            *spec,
            geo,
            w,
            b,
            vec![spec.out_channels, geo.dout, geo.hout, geo.wout],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &mut self,
        op: &'static str,
        x: Var,
        spec: ConvSpec,
        geo: Geometry,
        w: Var,
        b: Option<Var>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let out = conv_forward(
            &spec,
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(out_shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.record(op, out, &parents, move |ctx| {
            let need_b = has_bias && ctx.needs(2);
            let grads = conv_backward(
                &spec,
                &geo,
                ctx.input(0).data(),
                ctx.input(1).data(),
                ctx.grad.data(),
                (ctx.needs(0), ctx.needs(1), need_b),
            );
            let mut res = vec![
                grads.dx.map(|d| Tensor::new(ctx.input(0).shape().to_vec(), d)).transpose()?,
                grads.dw.map(|d| Tensor::new(ctx.input(1).shape().to_vec(), d)).transpose()?,
            ];
            if has_bias {
                res.push(grads.db.map(|d| Tensor::new([spec.out_channels], d)).transpose()?);
            }
            Ok(res)
        })
    }
}
