//! In-memory multitask datasets.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Inputs and per-task targets, all stacked along axis 0.
///
/// Segmentation-style targets hold class indices stored as floats with
/// shape `[N, ...spatial]`; regression targets have the head's output
/// shape `[N, C, ...spatial]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Vec<Tensor>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Vec<Tensor>) -> Result<Self> {
        let n = inputs.shape()[0];
        if targets.is_empty() {
            return Err(Error::Argument("a dataset needs at least one task target".into()));
        }
        for (j, t) in targets.iter().enumerate() {
            if t.shape()[0] != n {
                return Err(Error::Shape(format!(
                    "task {j} has {} targets for {n} inputs",
                    t.shape()[0]
                )));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self) -> usize {
        self.targets.len()
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.select(indices)?,
            targets: self
                .targets
                .iter()
                .map(|t| t.select(indices))
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Dataset {
        Dataset {
            inputs: self.inputs.cast(dtype),
            targets: self.targets.iter().map(|t| t.cast(dtype)).collect(),
        }
    }
}
