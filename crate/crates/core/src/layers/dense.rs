use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{init_dense, InitScheme};
use crate::tensor::{conv2d_grads, dispatch, DType, Element, Tensor};
use num_traits::Zero;

/// Fully connected layer `y = x·W + b`, with `W` stored as (inputs × outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "linear weight must be a matrix, got {:?}",
                weight.shape()
            )));
        }
        check_bias(&bias, weight.shape()[1], weight.dtype())?;
        Ok(Self { weight, bias })
    }

    pub fn init(
        in_features: usize,
        out_features: usize,
        bias: bool,
        scheme: InitScheme,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let weight = init_dense(&[in_features, out_features], scheme, seed, dtype)?;
        let bias = if bias {
            Some(Tensor::zeros(&[out_features], dtype)?)
        } else {
            None
        };
        Self::new(weight, bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// 2-D convolution with a (c_out × c_in × k × k) kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, geometry: ConvGeometry) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Shape(format!(
                "conv kernel must be c_out×c_in×k×k, got {s:?}"
            )));
        }
        check_bias(&bias, s[0], weight.dtype())?;
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
        scheme: InitScheme,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let weight = init_dense(&[c_out, c_in, kernel, kernel], scheme, seed, dtype)?;
        let bias = if bias {
            Some(Tensor::zeros(&[c_out], dtype)?)
        } else {
            None
        };
        Self::new(weight, bias, geometry)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_forward(x, &self.weight, self.bias.as_ref(), self.geometry)
    }
}

pub(crate) fn check_bias(bias: &Option<Tensor>, len: usize, dtype: DType) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [len] {
            return Err(Error::dim("bias", b.shape(), &[len]));
        }
        if b.dtype() != dtype {
            return Err(Error::DType {
                op: "bias",
                lhs: dtype,
                rhs: b.dtype(),
            });
        }
    }
    Ok(())
}

/// Adds `bias[c]` to every element whose axis-1 index is `c`.
pub(crate) fn add_channel_bias(y: &mut Tensor, bias: &Tensor) -> Result<()> {
    let shape = y.shape().to_vec();
    if shape.len() < 2 || bias.shape() != [shape[1]] {
        return Err(Error::dim("bias", &shape, bias.shape()));
    }
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    let dtype = bias.dtype();
    fn apply<T: Element>(y: &mut [T], b: &[T], channels: usize, inner: usize) {
        for (i, chunk) in y.chunks_exact_mut(inner).enumerate() {
            let bv = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    match dtype {
        DType::F32 => apply(
            y.as_mut_slice::<f32>().ok_or(Error::DType { op: "bias", lhs: dtype, rhs: DType::F64 })?,
            bias.as_slice::<f32>().unwrap(),
            channels,
            inner,
        ),
        DType::F64 => apply(
            y.as_mut_slice::<f64>().ok_or(Error::DType { op: "bias", lhs: dtype, rhs: DType::F32 })?,
            bias.as_slice::<f64>().unwrap(),
            channels,
            inner,
        ),
    }
    Ok(())
}

pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != weight.shape()[0] {
        return Err(Error::dim("linear", x.shape(), weight.shape()));
    }
    let mut y = x.matmul(weight)?;
    if let Some(b) = bias {
        add_channel_bias(&mut y, b)?;
    }
    Ok(y)
}

pub(crate) fn conv_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> Result<Tensor> {
    let mut y = x.conv2d(weight, g.stride, g.padding)?;
    if let Some(b) = bias {
        add_channel_bias(&mut y, b)?;
    }
    Ok(y)
}

/// Gradients of a plain weight op: (dx if requested, dW, dbias if biased).
pub(crate) struct OpGrads {
    pub dx: Option<Tensor>,
    pub dweight: Tensor,
    pub dbias: Option<Tensor>,
}

pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    dy: &Tensor,
    need_dx: bool,
) -> Result<OpGrads> {
    let expected = [x.shape()[0], weight.shape()[1]];
    if dy.shape() != expected {
        return Err(Error::dim("linear_backward", dy.shape(), &expected));
    }
    let dweight = x.transpose()?.matmul(dy)?;
    let dx = if need_dx {
        Some(dy.matmul(&weight.transpose()?)?)
    } else {
        None
    };
    let dbias = if has_bias {
        Some(dy.sum_except_axis(1)?)
    } else {
        None
    };
    Ok(OpGrads { dx, dweight, dbias })
}

pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    g: ConvGeometry,
    dy: &Tensor,
    need_dx: bool,
) -> Result<OpGrads> {
    let (dx, dweight) = conv2d_grads(x, weight, dy, g.stride, g.padding, need_dx)?;
    let dbias = if has_bias {
        Some(dy.sum_except_axis(1)?)
    } else {
        None
    };
    Ok(OpGrads { dx, dweight, dbias })
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    dispatch!(x, |s: T| Tensor::from_parts(
        x.shape(),
        s.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect::<Vec<T>>()
    ))
}

/// Passes `dy` where the forward output was positive.
pub(crate) fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("relu_backward", y.shape(), dy.shape()));
    }
    crate::tensor::dispatch2!("relu_backward", y, dy, |ys, ds: T| Tensor::from_parts(
        y.shape(),
        ys.iter()
            .zip(ds)
            .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
            .collect::<Vec<T>>()
    ))
}

fn spatial(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b * c, h, w)),
        _ => Err(Error::Shape(format!(
            "{op} expects b×c×H×W, got {:?}",
            x.shape()
        ))),
    }
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index that won (first maximum in scan order).
pub(crate) fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w) = spatial(x, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even spatial extents, got {h}×{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut shape = x.shape().to_vec();
    shape[2] = ho;
    shape[3] = wo;
    Ok(dispatch!(x, |s: T| {
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if s[idx] > s[best] {
                            best = idx;
                        }
                    }
                    out.push(s[best]);
                    arg.push(best);
                }
            }
        }
        (Tensor::from_parts(&shape, out), arg)
    }))
}

pub(crate) fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if dy.len() != argmax.len() {
        return Err(Error::dim("maxpool2_backward", dy.shape(), &[argmax.len()]));
    }
    let n: usize = input_shape.iter().product();
    Ok(dispatch!(dy, |d: T| {
        let mut dx = vec![T::zero(); n];
        for (&g, &idx) in d.iter().zip(argmax) {
            dx[idx] += g;
        }
        Tensor::from_parts(input_shape, dx)
    }))
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial(x, "upsample2")?;
    let mut shape = x.shape().to_vec();
    shape[2] = 2 * h;
    shape[3] = 2 * w;
    Ok(dispatch!(x, |s: T| {
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &s[p * h * w..(p + 1) * h * w];
            for i in 0..2 * h {
                let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        Tensor::from_parts(&shape, out)
    }))
}

pub(crate) fn upsample2_backward(dy: &Tensor) -> Result<Tensor> {
    let (planes, h2, w2) = spatial(dy, "upsample2_backward")?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Shape("upsample2 gradient must have even extents".into()));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut shape = dy.shape().to_vec();
    shape[2] = h;
    shape[3] = w;
    Ok(dispatch!(dy, |d: T| {
        let mut out = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[p * h * w + (i / 2) * w + j / 2] += d[p * h2 * w2 + i * w2 + j];
                }
            }
        }
        Tensor::from_parts(&shape, out)
    }))
}
