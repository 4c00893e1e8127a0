//! Output-level comparison of a factorized model and its compact export.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{ForwardMode, MtlModel};
use crate::rng::seeded;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

const BATCH: usize = 8;
/// Denominator floor for relative deltas.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct TaskDelta {
    pub max_abs: f64,
    pub max_rel: f64,
    /// Sample and flat element index (within that sample's output) of the
    /// largest absolute delta.
    pub worst_sample: usize,
    pub worst_element: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub tol: f64,
    pub max_abs: f64,
    pub max_rel: f64,
    pub per_task: Vec<TaskDelta>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Feeds `samples` standard-normal inputs through both models and compares
/// every task output. `mode` selects how the factorized model evaluates its
/// factorized layers. Passes iff the largest absolute delta is ≤ `tol`.
pub fn verify_equivalence(
    factorized: &MtlModel,
    compact: &MtlModel,
    samples: usize,
    tol: f64,
    seed: u64,
    mode: ForwardMode,
) -> Result<EquivalenceReport> {
    if !factorized.same_topology(compact) {
        return Err(Error::Structural(
            "models differ in layer kinds, tasks or input shape".into(),
        ));
    }
    let t = factorized.task_count();
    let mut per_task = vec![
        TaskDelta {
            max_abs: 0.0,
            max_rel: 0.0,
            worst_sample: 0,
            worst_element: 0,
        };
        t
    ];
    if samples == 0 {
        return Ok(EquivalenceReport {
            samples,
            tol,
            max_abs: 0.0,
            max_rel: 0.0,
            per_task,
            passed: true,
            warning: Some("no samples compared; the pass is vacuous".into()),
        });
    }
    let mut rng = seeded(seed);
    let mut done = 0;
    while done < samples {
        let b = BATCH.min(samples - done);
        let x = Tensor::from_fn(&compact.batch_shape(b), compact.dtype(), |_| StandardNormal.sample(&mut rng))?;
        let ya = factorized.forward(&x.cast(factorized.dtype()), mode)?;
        let yb = compact.forward(&x, ForwardMode::Contracted)?;
        for (j, (a, c)) in ya.iter().zip(&yb).enumerate() {
            let (a, c) = (a.to_f64_vec(), c.to_f64_vec());
            let per_sample = a.len() / b;
            for (i, (p, q)) in a.iter().zip(&c).enumerate() {
                let abs = (p - q).abs();
                let rel = abs / q.abs().max(REL_FLOOR);
                let d = &mut per_task[j];
                if abs > d.max_abs {
                    d.max_abs = abs;
                    d.worst_sample = done + i / per_sample;
                    d.worst_element = i % per_sample;
                }
                d.max_rel = d.max_rel.max(rel);
            }
        }
        done += b;
    }
    let max_abs = per_task.iter().map(|d| d.max_abs).fold(0.0, f64::max);
    let max_rel = per_task.iter().map(|d| d.max_rel).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        samples,
        tol,
        max_abs,
        max_rel,
        per_task,
        passed: max_abs <= tol,
        warning: None,
    })
}
