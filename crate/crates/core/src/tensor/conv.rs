//! 2-D convolution kernels.
//!
//! The tape uses the im2col path. [`conv2d_direct`] is the plain nested-loop
//! definition and is kept as the reference the im2col path is tested against.

use super::scalar::{gemm, Layout};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cfg: Conv2dConfig,
}

impl ConvGeometry {
    pub fn resolve(input: &[usize], weight: &[usize], cfg: Conv2dConfig) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input must be N×C×H×W, got {input:?}"),
            ));
        }
        if weight.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("weight must be Cout×Cin/g×kh×kw, got {weight:?}"),
            ));
        }
        if cfg.groups == 0 || cfg.stride == 0 {
            return Err(Error::Config(format!(
                "conv2d stride and groups must be positive (stride {}, groups {})",
                cfg.stride, cfg.groups
            )));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, per_group, kernel_h, kernel_w) =
            (weight[0], weight[1], weight[2], weight[3]);
        if in_channels % cfg.groups != 0 || out_channels % cfg.groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups {} must divide input channels {in_channels} and filters {out_channels}",
                cfg.groups
            )));
        }
        if per_group * cfg.groups != in_channels {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "weight expects {} input channels per group, input has {in_channels} over {} groups",
                    per_group, cfg.groups
                ),
            ));
        }
        let padded_h = height + 2 * cfg.padding;
        let padded_w = width + 2 * cfg.padding;
        if kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kernel_h}×{kernel_w} exceeds padded input {padded_h}×{padded_w}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            out_h: (padded_h - kernel_h) / cfg.stride + 1,
            out_w: (padded_w - kernel_w) / cfg.stride + 1,
            cfg,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.cfg.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.cfg.groups
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − padding`
/// falls inside the image.
#[inline]
fn valid_span(out: usize, size: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let hi = if size + padding > k {
        ((size + padding - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Appends the patch matrix for group `g`: rows are `(channel, ky, kx)`,
/// columns `(n, oy, ox)`.
fn im2col<F: Scalar>(geo: &ConvGeometry, x: &[F], g: usize, cols: &mut Vec<F>) {
    let (stride, pad) = (geo.cfg.stride, geo.cfg.padding);
    let cg = geo.in_per_group();
    let plane = geo.height * geo.width;
    let ow = geo.out_w;
    cols.reserve(geo.patch_len() * geo.batch * geo.positions());
    for c in 0..cg {
        let channel = g * cg + c;
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let (lo, hi) = valid_span(ow, geo.width, kx, stride, pad);
                for n in 0..geo.batch {
                    let src = &x[(n * geo.in_channels + channel) * plane..][..plane];
                    for oy in 0..geo.out_h {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < geo.height) else {
                            cols.resize(cols.len() + ow, F::zero());
                            continue;
                        };
                        let s = &src[iy * geo.width..][..geo.width];
                        cols.resize(cols.len() + lo, F::zero());
                        if stride == 1 {
                            cols.extend_from_slice(&s[lo + kx - pad..hi + kx - pad]);
                        } else {
                            cols.extend((lo..hi).map(|ox| s[ox * stride + kx - pad]));
                        }
                        cols.resize(cols.len() + ow - hi, F::zero());
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(geo: &ConvGeometry, cols: &[F], g: usize, dx: &mut [F]) {
    let (stride, pad) = (geo.cfg.stride, geo.cfg.padding);
    let p = geo.positions();
    let cols_per_row = geo.batch * p;
    let cg = geo.in_per_group();
    let plane = geo.height * geo.width;
    for c in 0..cg {
        let channel = g * cg + c;
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ky) * geo.kernel_w + kx;
                let src = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                let (lo, hi) = valid_span(geo.out_w, geo.width, kx, stride, pad);
                for n in 0..geo.batch {
                    let dst = &mut dx[(n * geo.in_channels + channel) * plane..][..plane];
                    for oy in 0..geo.out_h {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < geo.height) else {
                            continue;
                        };
                        let s = &src[n * p + oy * geo.out_w..][..geo.out_w];
                        let d = &mut dst[iy * geo.width..][..geo.width];
                        if stride == 1 {
                            for (a, &b) in d[lo + kx - pad..hi + kx - pad].iter_mut().zip(&s[lo..hi]) {
                                *a = *a + b;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                d[ix] = d[ix] + s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    geo: &ConvGeometry,
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    conv2d_forward_keep(geo, x, weight, bias, false).0
}

/// Forward pass that can also hand back the patch matrices of every group,
/// for reuse by [`conv2d_backward`].
pub fn conv2d_forward_keep<F: Scalar>(
    geo: &ConvGeometry,
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    keep_cols: bool,
) -> (Vec<F>, Option<Vec<F>>) {
    let k = geo.patch_len();
    let p = geo.positions();
    let np = geo.batch * p;
    let og = geo.out_per_group();
    let groups = geo.cfg.groups;
    let mut all_cols = Vec::with_capacity(if keep_cols { groups * k * np } else { k * np });
    let mut tmp = vec![F::zero(); og * np];
    let mut out = vec![F::zero(); geo.batch * geo.out_channels * p];
    for g in 0..groups {
        if !keep_cols {
            all_cols.clear();
        }
        im2col(geo, x, g, &mut all_cols);
        let cols = &all_cols[all_cols.len() - k * np..];
        let w_g = &weight[g * og * k..(g + 1) * og * k];
        gemm(
            og,
            k,
            np,
            F::one(),
            w_g,
            Layout::row_major(k),
            cols,
            Layout::row_major(np),
            F::zero(),
            &mut tmp,
            Layout::row_major(np),
        );
        for o in 0..og {
            let co = g * og + o;
            let b = bias.map_or(F::zero(), |b| b[co]);
            for n in 0..geo.batch {
                let src = &tmp[o * np + n * p..][..p];
                let dst = &mut out[(n * geo.out_channels + co) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    (out, keep_cols.then_some(all_cols))
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<F: Scalar>(
    geo: &ConvGeometry,
    x: &[F],
    weight: &[F],
    dy: &[F],
    need_input: bool,
    saved_cols: Option<&[F]>,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let k = geo.patch_len();
    let p = geo.positions();
    let np = geo.batch * p;
    let og = geo.out_per_group();
    let mut scratch = Vec::new();
    let mut dy_g = vec![F::zero(); og * np];
    let mut dcols = if need_input {
        vec![F::zero(); k * np]
    } else {
        Vec::new()
    };
    let mut dx = need_input.then(|| vec![F::zero(); x.len()]);
    let mut dw = vec![F::zero(); weight.len()];
    let mut db = vec![F::zero(); geo.out_channels];

    for g in 0..geo.cfg.groups {
        for o in 0..og {
            let co = g * og + o;
            let mut acc = F::zero();
            for n in 0..geo.batch {
                let src = &dy[(n * geo.out_channels + co) * p..][..p];
                dy_g[o * np + n * p..][..p].copy_from_slice(src);
                acc = acc + src.iter().copied().sum::<F>();
            }
            db[co] = acc;
        }
        let cols: &[F] = match saved_cols {
            Some(c) => &c[g * k * np..(g + 1) * k * np],
            None => {
                scratch.clear();
                im2col(geo, x, g, &mut scratch);
                &scratch
            }
        };
        gemm(
            og,
            np,
            k,
            F::one(),
            &dy_g,
            Layout::row_major(np),
            cols,
            Layout::transposed(np),
            F::zero(),
            &mut dw[g * og * k..(g + 1) * og * k],
            Layout::row_major(k),
        );
        if let Some(dx) = dx.as_mut() {
            let w_g = &weight[g * og * k..(g + 1) * og * k];
            gemm(
                k,
                og,
                np,
                F::one(),
                w_g,
                Layout::transposed(k),
                &dy_g,
                Layout::row_major(np),
                F::zero(),
                &mut dcols,
                Layout::row_major(np),
            );
            col2im_add(geo, &dcols, g, dx);
        }
    }
    (dx, dw, db)
}

/// Direct nested-loop convolution, straight from the definition.
pub fn conv2d_direct<F: Scalar>(
    geo: &ConvGeometry,
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let cg = geo.in_per_group();
    let og = geo.out_per_group();
    let mut out = vec![F::zero(); geo.batch * geo.out_channels * geo.positions()];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let g = co / og;
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let mut acc = bias.map_or(0.0, |b| b[co].as_f64());
                    for c in 0..cg {
                        let ci = g * cg + c;
                        for ky in 0..geo.kernel_h {
                            for kx in 0..geo.kernel_w {
                                let iy = (oy * geo.cfg.stride + ky) as isize - geo.cfg.padding as isize;
                                let ix = (ox * geo.cfg.stride + kx) as isize - geo.cfg.padding as isize;
                                if iy < 0 || ix < 0 || iy >= geo.height as isize || ix >= geo.width as isize {
                                    continue;
                                }
                                let xv = x[((n * geo.in_channels + ci) * geo.height + iy as usize)
                                    * geo.width
                                    + ix as usize];
                                let wv = weight[((co * cg + c) * geo.kernel_h + ky) * geo.kernel_w + kx];
                                acc += xv.as_f64() * wv.as_f64();
                            }
                        }
                    }
                    out[((n * geo.out_channels + co) * geo.out_h + oy) * geo.out_w + ox] =
                        F::from_f64(acc);
                }
            }
        }
    }
    out
}
