//! Model presets and the dense → factorized conversion.

use std::fmt;

use super::{Conv2d, ConvGeometry, FactorInit, FactorizedConv2d, FactorizedLinear, Layer, Linear, MtlModel, Sharing, TaskHead};
use crate::error::{Error, Result};
use crate::linalg::InitScheme;
use crate::rng::derive_seed;
use crate::tensor::DType;

/// Trunk architectures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// Stack of linear layers on vector inputs, optionally with ReLU in
    /// between. Every trunk layer is factorized.
    Mlp { hidden: Vec<usize>, relu: bool },
    /// Small encoder/decoder conv trunk: one 3×3 conv + ReLU per width, 2×
    /// max-pooling after the first two blocks, two 2× upsamplings at the
    /// end; 1×1 conv heads. Every trunk conv except the last is factorized.
    SegnetMini { widths: Vec<usize> },
}

const DOWNSAMPLINGS: usize = 2;

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Argument(format!("`{key}` must be a list of positive integers, got `{v}`")))
        })
        .collect()
}

impl ModelSpec {
    pub fn segnet_mini() -> Self {
        ModelSpec::SegnetMini {
            widths: vec![16, 32, 32, 32],
        }
    }

    /// Parses `mlp hidden=32,32 relu=true` or `segnet-mini widths=16,32,32,32`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let name = words
            .next()
            .ok_or_else(|| Error::Argument("empty model spec".into()))?;
        let mut spec = match name {
            "mlp" => ModelSpec::Mlp {
                hidden: vec![32],
                relu: false,
            },
            "segnet-mini" => ModelSpec::segnet_mini(),
            other => return Err(Error::Argument(format!("unknown model `{other}`"))),
        };
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("expected key=value in model spec, got `{w}`")))?;
            match (&mut spec, k) {
                (ModelSpec::Mlp { hidden, .. }, "hidden") => *hidden = parse_list(k, v)?,
                (ModelSpec::Mlp { relu, .. }, "relu") => {
                    *relu = v
                        .parse()
                        .map_err(|_| Error::Argument(format!("`relu` must be true or false, got `{v}`")))?
                }
                (ModelSpec::SegnetMini { widths }, "widths") => *widths = parse_list(k, v)?,
                _ => return Err(Error::Argument(format!("unknown option `{k}` for model `{name}`"))),
            }
        }
        Ok(spec)
    }

    /// Builds the plain (unfactorized) model.
    pub fn build_baseline(
        &self,
        input_shape: &[usize],
        tasks: &[TaskHead],
        scheme: InitScheme,
        seed: u64,
        dtype: DType,
    ) -> Result<MtlModel> {
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            derive_seed(seed, stream)
        };
        let (trunk, feat) = match self {
            ModelSpec::Mlp { hidden, relu } => {
                let [mut prev] = *input_shape else {
                    return Err(Error::Structural(format!("mlp needs vector inputs, got {input_shape:?}")));
                };
                let mut trunk = Vec::new();
                for &h in hidden {
                    trunk.push(Layer::Linear(Linear::init(prev, h, true, scheme, next_seed(), dtype)?));
                    if *relu {
                        trunk.push(Layer::Relu);
                    }
                    prev = h;
                }
                (trunk, prev)
            }
            ModelSpec::SegnetMini { widths } => {
                let [c_in, h, w] = *input_shape else {
                    return Err(Error::Structural(format!("segnet-mini needs c×H×W inputs, got {input_shape:?}")));
                };
                let factor = 1 << DOWNSAMPLINGS.min(widths.len());
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::Structural(format!(
                        "segnet-mini needs H and W divisible by {factor}, got {h}×{w}"
                    )));
                }
                let geometry = ConvGeometry { stride: 1, padding: 1 };
                let mut trunk = Vec::new();
                let mut prev = c_in;
                for (i, &width) in widths.iter().enumerate() {
                    trunk.push(Layer::Conv2d(Conv2d::init(prev, width, 3, geometry, true, scheme, next_seed(), dtype)?));
                    trunk.push(Layer::Relu);
                    if i < DOWNSAMPLINGS {
                        trunk.push(Layer::MaxPool2);
                    }
                    prev = width;
                }
                for _ in 0..DOWNSAMPLINGS.min(widths.len()) {
                    trunk.push(Layer::Upsample2);
                }
                (trunk, prev)
            }
        };
        let heads = tasks
            .iter()
            .map(|task| -> Result<Vec<Layer>> {
                Ok(vec![match self {
                    ModelSpec::Mlp { .. } => {
                        Layer::Linear(Linear::init(feat, task.channels, true, scheme, next_seed(), dtype)?)
                    }
                    ModelSpec::SegnetMini { .. } => Layer::Conv2d(Conv2d::init(
                        feat,
                        task.channels,
                        1,
                        ConvGeometry::default(),
                        true,
                        scheme,
                        next_seed(),
                        dtype,
                    )?),
                }])
            })
            .collect::<Result<Vec<_>>>()?;
        MtlModel::new(trunk, heads, tasks.to_vec(), input_shape.to_vec(), Sharing::TaskDiagonals)
    }

    /// Trunk layer indices this architecture overparameterises.
    pub fn factorized_indices(&self, model: &MtlModel) -> Vec<usize> {
        let weighted: Vec<usize> = model
            .trunk
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Linear(_) | Layer::Conv2d(_)))
            .map(|(i, _)| i)
            .collect();
        match self {
            ModelSpec::Mlp { .. } => weighted,
            ModelSpec::SegnetMini { .. } => {
                let keep = weighted.len().saturating_sub(1);
                weighted[..keep].to_vec()
            }
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self {
            ModelSpec::Mlp { hidden, relu } => write!(f, "mlp hidden={} relu={relu}", join(hidden)),
            ModelSpec::SegnetMini { widths } => write!(f, "segnet-mini widths={}", join(widths)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FactorizeOptions {
    pub init: FactorInit,
    pub sharing: Sharing,
    /// Rank above the full-rank minimum.
    pub extra_rank: usize,
    pub scheme: InitScheme,
    pub seed: u64,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        Self {
            init: FactorInit::Spectral,
            sharing: Sharing::TaskDiagonals,
            extra_rank: 0,
            scheme: InitScheme::KaimingUniform,
            seed: 0,
        }
    }
}

/// Replaces the listed plain trunk layers by factorized ones built from
/// their current weights.
pub fn factorize_model(model: &MtlModel, indices: &[usize], opts: &FactorizeOptions) -> Result<MtlModel> {
    let diags = opts.sharing.diag_count(model.task_count());
    let mut trunk = model.trunk.clone();
    for &i in indices {
        let seed = derive_seed(opts.seed, 1000 + i as u64);
        trunk[i] = match &model.trunk[i] {
            Layer::Linear(l) => {
                let rank = l.in_features().min(l.out_features()) + opts.extra_rank;
                Layer::FactorizedLinear(FactorizedLinear::from_dense(
                    &l.weight,
                    l.bias.clone(),
                    rank,
                    diags,
                    opts.init,
                    opts.scheme,
                    seed,
                )?)
            }
            Layer::Conv2d(c) => {
                let k = c.kernel();
                let rank = (c.c_out() * k).min(c.c_in() * k) + opts.extra_rank;
                Layer::FactorizedConv2d(FactorizedConv2d::from_dense(
                    &c.weight,
                    c.bias.clone(),
                    c.geometry,
                    rank,
                    diags,
                    opts.init,
                    opts.scheme,
                    seed,
                )?)
            }
            other => {
                return Err(Error::Structural(format!(
                    "trunk layer {i} ({}) cannot be factorized",
                    other.kind_name()
                )))
            }
        };
    }
    MtlModel::new(
        trunk,
        model.heads.clone(),
        model.tasks.clone(),
        model.input_shape.clone(),
        opts.sharing,
    )
}
