use super::kernels::{gemm, transpose, transpose_into};
use super::{dispatch2, Element, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis. Errors unless the
/// stride divides the padded span exactly.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "(input {input} + 2*padding {padding} - kernel {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &Tensor, weight: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let (xs, ws) = (x.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let ho = conv_output_extent(xs[2], ws[2], stride.0, padding.0)?;
        let wo = conv_output_extent(xs[3], ws[3], stride.1, padding.1)?;
        Ok(Self {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Output positions `o` along one axis whose source `o·s + k − pad` lies
/// inside `0..extent`, as a half-open range.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if extent + pad <= k {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Unfolds one sample (c_in×H×W) into a (c_in·k·k)×(Ho·Wo) column matrix.
fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let npix = g.out_pixels();
    let (sh, sw) = g.stride;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for kh in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.ho, sh, kh, g.pad.0, g.h);
            for kw in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.wo, sw, kw, g.pad.1, g.w);
                let row = (ci * g.kh + kh) * g.kw + kw;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                dst[..oh_lo * g.wo].fill(T::zero());
                dst[oh_hi * g.wo..].fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + kh - g.pad.0;
                    let d = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    d[..ow_lo].fill(T::zero());
                    d[ow_hi..].fill(T::zero());
                    if ow_lo == ow_hi {
                        continue;
                    }
                    let iw0 = ow_lo * sw + kw - g.pad.1;
                    let src = &plane[ih * g.w..(ih + 1) * g.w];
                    if sw == 1 {
                        d[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for (j, v) in d[ow_lo..ow_hi].iter_mut().enumerate() {
                            *v = src[iw0 + j * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a (c_in×H×W) sample gradient.
fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let npix = g.out_pixels();
    let (sh, sw) = g.stride;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for kh in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.ho, sh, kh, g.pad.0, g.h);
            for kw in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.wo, sw, kw, g.pad.1, g.w);
                if ow_lo == ow_hi {
                    continue;
                }
                let row = (ci * g.kh + kh) * g.kw + kw;
                let src = &cols[row * npix..(row + 1) * npix];
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + kh - g.pad.0;
                    let iw0 = ow_lo * sw + kw - g.pad.1;
                    let s = &src[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                    let d = &mut plane[ih * g.w..(ih + 1) * g.w];
                    for (j, &v) in s.iter().enumerate() {
                        d[iw0 + j * sw] += v;
                    }
                }
            }
        }
    }
}

impl Geometry {
    /// True when the column matrix of a sample is the sample itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn forward_kernel<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let npix = g.out_pixels();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.c_out * npix];
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * npix }];
    let in_len = g.c_in * g.in_pixels();
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols_b: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.c_out * npix..(b + 1) * g.c_out * npix];
        gemm(w, cols_b, dst, g.c_out, patch, npix);
    }
    out
}

pub(super) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let g = Geometry::new(x, weight, stride, padding)?;
    dispatch2!("conv2d", x, weight, |xs, ws: T| {
        Tensor::from_parts(
            &[g.batch, g.c_out, g.ho, g.wo],
            forward_kernel(xs, ws, &g),
        )
    })
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
}

fn backward_kernel<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &Geometry,
    need_dx: bool,
) -> (Vec<T>, Vec<T>) {
    let npix = g.out_pixels();
    let patch = g.patch();
    let in_len = g.c_in * g.in_pixels();
    let out_len = g.c_out * npix;
    let w_t = transpose(w, g.c_out, patch);
    let pointwise = g.is_pointwise();
    // accumulated transposed (patch×c_out) so the inner loop runs over c_out
    let mut dw_t = vec![T::zero(); patch * g.c_out];
    let mut dout_t = vec![T::zero(); npix * g.c_out];
    let mut dx = vec![T::zero(); if need_dx { g.batch * in_len } else { 0 }];
    let scratch = if pointwise { 0 } else { patch * npix };
    let mut cols = vec![T::zero(); scratch];
    let mut dcols = vec![T::zero(); if need_dx { scratch } else { 0 }];
    for b in 0..g.batch {
        let dout_b = &dout[b * out_len..(b + 1) * out_len];
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols_b: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        // dWᵀ += cols (patch×npix) · dout_bᵀ (npix×c_out); samples in order
        transpose_into(dout_b, g.c_out, npix, &mut dout_t);
        gemm(cols_b, &dout_t, &mut dw_t, patch, npix, g.c_out);
        if !need_dx {
            continue;
        }
        let dx_b = &mut dx[b * in_len..(b + 1) * in_len];
        if pointwise {
            gemm(&w_t, dout_b, dx_b, patch, g.c_out, npix);
        } else {
            dcols.fill(T::zero());
            gemm(&w_t, dout_b, &mut dcols, patch, g.c_out, npix);
            col2im(&dcols, g, dx_b);
        }
    }
    (dx, transpose(&dw_t, patch, g.c_out))
}

/// Gradients of `conv2d(x, weight)` given the upstream gradient `dout`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads> {
    let (dx, dweight) = conv2d_grads(x, weight, dout, stride, padding, true)?;
    Ok(Conv2dGrads {
        dx: dx.expect("requested"),
        dweight,
    })
}

/// Weight gradient, plus the input gradient when `need_dx`.
pub(crate) fn conv2d_grads(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = Geometry::new(x, weight, (stride, stride), (padding, padding))?;
    let expected = [g.batch, g.c_out, g.ho, g.wo];
    if dout.shape() != expected {
        return Err(Error::dim("conv2d_backward", dout.shape(), &expected));
    }
    let (dx, dweight) = dispatch2!("conv2d_backward", x, weight, |xs, ws: T| {
        let d = dout.as_slice::<T>().ok_or(Error::DType {
            op: "conv2d_backward",
            lhs: x.dtype(),
            rhs: dout.dtype(),
        })?;
        let (dx, dw) = backward_kernel(xs, ws, d, &g, need_dx);
        (
            need_dx.then(|| Tensor::from_parts(x.shape(), dx)),
            Tensor::from_parts(weight.shape(), dw),
        )
    })?;
    Ok((dx, dweight))
}
