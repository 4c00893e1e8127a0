//! Parameter and FLOP accounting.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{ForwardMode, Layer, MtlModel};
use crate::rng::seeded;
use crate::tensor::{conv_output_extent, Tensor};
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    /// `trunk.<i>` or `head.<task>.<i>`.
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    /// `2 ×` multiply-accumulates for one sample.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub param_count: usize,
    pub flops: u64,
    pub input_shape: Vec<usize>,
    pub breakdown: Vec<LayerCost>,
}

/// Per-sample output shape and FLOPs of `layer` on a per-sample input
/// shape. Factorized layers are charged for the plain op they contract to.
fn layer_flops(layer: &Layer, shape: &[usize]) -> Result<(Vec<usize>, u64)> {
    let mismatch = |want: usize| Error::dim(layer.kind_name(), shape, &[want]);
    let linear = |m: usize, n: usize| -> Result<(Vec<usize>, u64)> {
        if shape != [m] {
            return Err(mismatch(m));
        }
        Ok((vec![n], 2 * (m * n) as u64))
    };
    let conv = |co: usize, ci: usize, k: usize, stride: usize, pad: usize| -> Result<(Vec<usize>, u64)> {
        let [c, h, w] = *shape else { return Err(mismatch(ci)) };
        if c != ci {
            return Err(mismatch(ci));
        }
        let ho = conv_output_extent(h, k, stride, pad)?;
        let wo = conv_output_extent(w, k, stride, pad)?;
        Ok((vec![co, ho, wo], 2 * (co * ci * k * k * ho * wo) as u64))
    };
    match layer {
        Layer::Linear(l) => linear(l.in_features(), l.out_features()),
        Layer::FactorizedLinear(l) => linear(l.in_features(), l.out_features()),
        Layer::Conv2d(c) => conv(c.c_out(), c.c_in(), c.kernel(), c.geometry.stride, c.geometry.padding),
        Layer::FactorizedConv2d(c) => conv(c.c_out(), c.c_in(), c.kernel(), c.geometry.stride, c.geometry.padding),
        Layer::Relu => Ok((shape.to_vec(), 0)),
        Layer::MaxPool2 => match *shape {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok((vec![c, h / 2, w / 2], 0)),
            _ => Err(Error::Shape(format!("maxpool2 needs c×H×W with even extents, got {shape:?}"))),
        },
        Layer::Upsample2 => match *shape {
            [c, h, w] => Ok((vec![c, 2 * h, 2 * w], 0)),
            _ => Err(Error::Shape(format!("upsample2 needs c×H×W, got {shape:?}"))),
        },
    }
}

/// Parameters and per-sample FLOPs of every layer for inputs of
/// `input_shape` (no batch axis).
pub fn count_flops(model: &MtlModel, input_shape: &[usize]) -> Result<CostReport> {
    let mut breakdown = Vec::new();
    let mut shape = input_shape.to_vec();
    for (i, layer) in model.trunk.iter().enumerate() {
        let (out, flops) = layer_flops(layer, &shape)?;
        breakdown.push(LayerCost {
            name: format!("trunk.{i}"),
            kind: layer.kind_name(),
            params: layer.param_count(),
            flops,
        });
        shape = out;
    }
    for (j, head) in model.heads.iter().enumerate() {
        let mut h = shape.clone();
        for (i, layer) in head.iter().enumerate() {
            let (out, flops) = layer_flops(layer, &h)?;
            breakdown.push(LayerCost {
                name: format!("head.{j}.{i}"),
                kind: layer.kind_name(),
                params: layer.param_count(),
                flops,
            });
            h = out;
        }
    }
    Ok(CostReport {
        param_count: breakdown.iter().map(|c| c.params).sum(),
        flops: breakdown.iter().map(|c| c.flops).sum(),
        input_shape: input_shape.to_vec(),
        breakdown,
    })
}

/// [`count_flops`] at the model's own input shape.
pub fn count_params(model: &MtlModel) -> Result<CostReport> {
    count_flops(model, &model.input_shape)
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub runs: usize,
    pub batch: usize,
    pub mean_ms: f64,
    /// Wall-clock figures depend on the machine; only compare numbers taken
    /// on the same host.
    pub note: &'static str,
}

/// Mean wall-clock time of a full forward pass over `runs` repetitions.
pub fn latency(model: &MtlModel, batch: usize, runs: usize, mode: ForwardMode) -> Result<LatencyReport> {
    let runs = runs.max(1);
    let shape = model.batch_shape(batch.max(1));
    let mut rng = seeded(0x1a7e);
    let x = Tensor::from_fn(&shape, model.dtype(), |_| StandardNormal.sample(&mut rng))?;
    model.forward(&x, mode)?;
    let start = Instant::now();
    for _ in 0..runs {
        model.forward(&x, mode)?;
    }
    Ok(LatencyReport {
        runs,
        batch: batch.max(1),
        mean_ms: start.elapsed().as_secs_f64() * 1e3 / runs as f64,
        note: "machine-dependent wall-clock",
    })
}
