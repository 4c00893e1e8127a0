use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    KaimingUniform,
    GlorotUniform,
}

impl InitScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kaiming-uniform" => Ok(Self::KaimingUniform),
            "glorot-uniform" => Ok(Self::GlorotUniform),
            other => Err(Error::Argument(format!("unknown init scheme `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::KaimingUniform => "kaiming-uniform",
            Self::GlorotUniform => "glorot-uniform",
        }
    }

    /// Half-width of the uniform distribution.
    pub fn limit(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Self::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Self::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    pub fn variance(self, fan_in: usize, fan_out: usize) -> f64 {
        let l = self.limit(fan_in, fan_out);
        l * l / 3.0
    }
}

/// Fan-in and fan-out for a weight shape. Matrices are stored as
/// (inputs × outputs); conv kernels as (c_out × c_in × k × k).
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [fan_in, fan_out] => Ok((fan_in, fan_out)),
        [c_out, c_in, kh, kw] => Ok((c_in * kh * kw, c_out * kh * kw)),
        _ => Err(Error::Argument(format!(
            "cannot derive fans for rank-{} shape {shape:?}",
            shape.len()
        ))),
    }
}

pub fn init_dense(shape: &[usize], scheme: InitScheme, seed: u64, dtype: DType) -> Result<Tensor> {
    let (fan_in, fan_out) = fans(shape)?;
    let limit = scheme.limit(fan_in, fan_out);
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, dtype, |_| rng.random_range(-limit..limit))
}
