//! Layers, the multitask model, and the architectures used by the bench.

pub mod arch;
pub mod dense;
pub mod factorized;
pub mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dense::{Conv2d, ConvGeometry, Linear};
pub use factorized::{
    block_ranges, compose_diag, compose_diag_except, kernel_to_matrix, matrix_to_kernel, FactorGrads, FactorInit,
    FactorizedConv2d, FactorizedGrads, FactorizedLinear, ForwardMode,
};
pub use model::{Grads, LossKind, MtlModel, ParamKey, Sharing, Site, TaskHead};

/// Which tensor of a layer a parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    U,
    V,
    Diag(usize),
}

impl ParamRole {
    pub fn is_diag(self) -> bool {
        matches!(self, ParamRole::Diag(_))
    }

    pub fn suffix(self) -> String {
        match self {
            ParamRole::Weight => "weight".into(),
            ParamRole::Bias => "bias".into(),
            ParamRole::U => "u".into(),
            ParamRole::V => "v".into(),
            ParamRole::Diag(t) => format!("diag.{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    FactorizedLinear(FactorizedLinear),
    FactorizedConv2d(FactorizedConv2d),
    Relu,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    /// Nearest-neighbour 2× upsampling.
    Upsample2,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Tensor),
    /// Input plus the weight contracted for this step.
    Factorized { input: Tensor, weight: Tensor },
    Relu { output: Tensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Upsample,
}

pub type ParamGrads = Vec<(ParamRole, Tensor)>;

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::FactorizedLinear(_) => "factorized-linear",
            Layer::FactorizedConv2d(_) => "factorized-conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Upsample2 => "upsample2",
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, Layer::FactorizedLinear(_) | Layer::FactorizedConv2d(_))
    }

    pub fn task_diag_count(&self) -> Option<usize> {
        match self {
            Layer::FactorizedLinear(l) => Some(l.tasks()),
            Layer::FactorizedConv2d(l) => Some(l.tasks()),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::FactorizedLinear(l) => l.forward(x, mode),
            Layer::FactorizedConv2d(l) => l.forward(x, mode),
            Layer::Relu => Ok(dense::relu(x)),
            Layer::MaxPool2 => dense::maxpool2(x).map(|(y, _)| y),
            Layer::Upsample2 => dense::upsample2(x),
        }
    }

    /// Forward pass that records what [`Layer::backward`] needs. Factorized
    /// layers contract their weight once per call and run the plain op.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Linear(l) => Ok((l.forward(x)?, Cache::Input(x.clone()))),
            Layer::Conv2d(l) => Ok((l.forward(x)?, Cache::Input(x.clone()))),
            Layer::FactorizedLinear(l) => {
                let weight = l.contract()?;
                let y = dense::linear_forward(x, &weight, l.bias.as_ref())?;
                Ok((y, Cache::Factorized { input: x.clone(), weight }))
            }
            Layer::FactorizedConv2d(l) => {
                let weight = l.contract()?;
                let y = dense::conv_forward(x, &weight, l.bias.as_ref(), l.geometry)?;
                Ok((y, Cache::Factorized { input: x.clone(), weight }))
            }
            Layer::Relu => {
                let y = dense::relu(x);
                Ok((y.clone(), Cache::Relu { output: y }))
            }
            Layer::MaxPool2 => {
                let (y, argmax) = dense::maxpool2(x)?;
                Ok((
                    y,
                    Cache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::Upsample2 => Ok((dense::upsample2(x)?, Cache::Upsample)),
        }
    }

    /// Returns the input gradient (when `need_dx`) and every parameter
    /// gradient of this layer.
    pub fn backward(&self, cache: &Cache, dy: &Tensor, need_dx: bool) -> Result<(Option<Tensor>, ParamGrads)> {
        let mismatch = || Error::Structural(format!("cache does not belong to a {} layer", self.kind_name()));
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => {
                let g = dense::linear_backward(x, &l.weight, l.bias.is_some(), dy, need_dx)?;
                Ok((g.dx, weight_and_bias(g.dweight, g.dbias)))
            }
            (Layer::Conv2d(l), Cache::Input(x)) => {
                let g = dense::conv_backward(x, &l.weight, l.bias.is_some(), l.geometry, dy, need_dx)?;
                Ok((g.dx, weight_and_bias(g.dweight, g.dbias)))
            }
            (Layer::FactorizedLinear(l), Cache::Factorized { input, weight }) => {
                Ok(factorized_param_grads(l.backward_with(input, weight, dy, need_dx)?))
            }
            (Layer::FactorizedConv2d(l), Cache::Factorized { input, weight }) => {
                Ok(factorized_param_grads(l.backward_with(input, weight, dy, need_dx)?))
            }
            (Layer::Relu, Cache::Relu { output }) => Ok((Some(dense::relu_backward(output, dy)?), vec![])),
            (Layer::MaxPool2, Cache::Pool { input_shape, argmax }) => {
                Ok((Some(dense::maxpool2_backward(input_shape, argmax, dy)?), vec![]))
            }
            (Layer::Upsample2, Cache::Upsample) => Ok((Some(dense::upsample2_backward(dy)?), vec![])),
            _ => Err(mismatch()),
        }
    }

    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Layer::Linear(Linear { weight, bias }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => {
                out.push((ParamRole::Weight, weight));
                if let Some(b) = bias {
                    out.push((ParamRole::Bias, b));
                }
            }
            Layer::FactorizedLinear(FactorizedLinear { u, task_diags, v, bias })
            | Layer::FactorizedConv2d(FactorizedConv2d { u, task_diags, v, bias, .. }) => {
                out.push((ParamRole::U, u));
                out.extend(task_diags.iter().enumerate().map(|(i, d)| (ParamRole::Diag(i), d)));
                out.push((ParamRole::V, v));
                if let Some(b) = bias {
                    out.push((ParamRole::Bias, b));
                }
            }
            Layer::Relu | Layer::MaxPool2 | Layer::Upsample2 => {}
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            Layer::Linear(Linear { weight, bias }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => {
                out.push((ParamRole::Weight, weight));
                if let Some(b) = bias {
                    out.push((ParamRole::Bias, b));
                }
            }
            Layer::FactorizedLinear(FactorizedLinear { u, task_diags, v, bias })
            | Layer::FactorizedConv2d(FactorizedConv2d { u, task_diags, v, bias, .. }) => {
                out.push((ParamRole::U, u));
                out.extend(task_diags.iter_mut().enumerate().map(|(i, d)| (ParamRole::Diag(i), d)));
                out.push((ParamRole::V, v));
                if let Some(b) = bias {
                    out.push((ParamRole::Bias, b));
                }
            }
            Layer::Relu | Layer::MaxPool2 | Layer::Upsample2 => {}
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Plain equivalent of this layer (a copy when already plain).
    pub fn contracted(&self) -> Result<Layer> {
        Ok(match self {
            Layer::FactorizedLinear(l) => Layer::Linear(l.to_linear()?),
            Layer::FactorizedConv2d(l) => Layer::Conv2d(l.to_conv()?),
            other => other.clone(),
        })
    }
}

fn weight_and_bias(dweight: Tensor, dbias: Option<Tensor>) -> ParamGrads {
    let mut out = vec![(ParamRole::Weight, dweight)];
    if let Some(b) = dbias {
        out.push((ParamRole::Bias, b));
    }
    out
}

fn factorized_param_grads(g: FactorizedGrads) -> (Option<Tensor>, ParamGrads) {
    let mut out = vec![(ParamRole::U, g.du), (ParamRole::V, g.dv)];
    out.extend(g.d_task_diags.into_iter().enumerate().map(|(i, d)| (ParamRole::Diag(i), d)));
    if let Some(b) = g.dbias {
        out.push((ParamRole::Bias, b));
    }
    (g.dx, out)
}
