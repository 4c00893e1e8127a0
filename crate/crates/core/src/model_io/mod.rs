//! Model export: contraction, archives, cost accounting and equivalence
//! checks.

pub mod archive;
pub mod cost;
pub mod layout;
pub mod verify;

pub use archive::{TensorArchive, EXTENSION};
pub use cost::{count_flops, count_params, latency, CostReport, LatencyReport, LayerCost};
pub use layout::{load_model, model_from_archive, model_to_archive, save_model};
pub use verify::{verify_equivalence, EquivalenceReport, TaskDelta};

use crate::error::Result;
use crate::layers::MtlModel;

/// Replaces every factorized layer by its plain contraction. Idempotent.
pub fn contract_model(model: &MtlModel) -> Result<MtlModel> {
    model.contract()
}
