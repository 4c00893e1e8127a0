//! Iterative multitask training: per-task diagonals are fitted on their own
//! task loss over a small subset (phase A), then everything else is fitted
//! on the weighted joint loss with the diagonals frozen (phase B).

pub mod config;
pub mod loss;
pub mod optim;
pub mod penalty;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

pub use config::{Alternation, LossWeights, Mode, TrainConfig};
pub use loss::{task_loss, LossOutput};
pub use optim::{Optimizer, OptimizerKind};
pub use penalty::{frobenius_penalty, layer_penalty, FrobeniusForm};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{block_ranges, ForwardMode, Grads, MtlModel, ParamKey, ParamRole, Sharing, Site};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

const SUBSET_STREAM: u64 = 0x5b5e7;
/// Seed stream of the per-epoch batch order.
pub const ORDER_STREAM: u64 = 0x0bde7;

/// `⌈ρ·n⌉` distinct indices in pseudo-random order, fixed by
/// `(seed, epoch)`.
pub fn subset_sample(n: usize, fraction: f64, seed: u64, epoch: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Argument("cannot sample from an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("sample fraction must lie in (0, 1], got {fraction}")));
    }
    // The slack keeps e.g. 0.03·100 from rounding up to 4.
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(derive_seed(seed, epoch as u64)));
    idx.truncate(k);
    Ok(idx)
}

/// Losses from one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Unweighted mean loss of every task on the batch.
    pub task_losses: Vec<f64>,
    pub penalty: f64,
}

fn divergence(phase: &'static str, loss: f64) -> Error {
    Error::Divergence {
        epoch: 0,
        batch: 0,
        phase,
        loss,
    }
}

fn check_finite(phase: &'static str, out: &StepOutput) -> Result<()> {
    let total: f64 = out.task_losses.iter().sum::<f64>() + out.penalty;
    if total.is_finite() {
        Ok(())
    } else {
        Err(divergence(phase, total))
    }
}

/// Optimizer step that reports non-finite parameters as divergence.
fn apply(opt: &mut Optimizer, model: &mut MtlModel, grads: &Grads, lr: f64, phase: &'static str) -> Result<()> {
    opt.step(model, grads, lr).map_err(|e| match e {
        Error::NonFinite { .. } => divergence(phase, f64::NAN),
        other => other,
    })
}

/// Keeps block `range` of `src` along the rank axis of a factor and adds it
/// into `dst`. The rank axis is the last axis of `U` and the first of `V`.
fn add_block(dst: &mut Tensor, src: &Tensor, role: ParamRole, range: &std::ops::Range<usize>) -> Result<()> {
    let shape = src.shape().to_vec();
    let r_axis_last = role == ParamRole::U;
    let r = if r_axis_last { shape[shape.len() - 1] } else { shape[0] };
    let inner = src.len() / r;
    let masked = Tensor::from_fn(&shape, src.dtype(), |i| {
        let rank_index = if r_axis_last { i % r } else { i / inner };
        if range.contains(&rank_index) {
            src.get(i)
        } else {
            0.0
        }
    })?;
    *dst = dst.add(&masked)?;
    Ok(())
}

/// Whether `key` is a factor that is split into per-task blocks.
fn is_routed(model: &MtlModel, key: &ParamKey) -> bool {
    if key.site != Site::Trunk || !model.trunk[key.layer].is_factorized() {
        return false;
    }
    match model.sharing {
        Sharing::TaskDiagonals => false,
        Sharing::UvBlocks => matches!(key.role, ParamRole::U | ParamRole::V),
        Sharing::MBlocks => key.role.is_diag(),
    }
}

/// Losses and gradients of `Σ_j weights[j]·L_j (+ Frobenius penalty)`.
/// Tasks with zero weight contribute no gradient anywhere. Under block
/// sharing, every routed block only receives its own task's gradient.
fn compute_grads(
    model: &MtlModel,
    batch: &Dataset,
    weights: &[f64],
    frobenius: Option<(f64, FrobeniusForm)>,
) -> Result<(StepOutput, Grads)> {
    let t = model.task_count();
    if batch.task_count() != t || weights.len() != t {
        return Err(Error::Structural(format!(
            "model has {t} tasks, batch {} targets, {} loss weights",
            batch.task_count(),
            weights.len()
        )));
    }
    let trunk = model.forward_trunk_train(&batch.inputs)?;
    let mut grads = Grads::new();
    let mut task_losses = Vec::with_capacity(t);
    let mut dfeats: Vec<(usize, Tensor)> = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for j in 0..t {
        let pass = model.forward_head_train(j, &trunk.output)?;
        let out = task_loss(model.tasks[j].loss, &pass.output, &batch.targets[j])?;
        task_losses.push(out.value);
        if weights[j] == 0.0 {
            continue;
        }
        let (dfeat, head_grads) = model.backward_head(j, &pass, &out.grad.scale(weights[j]))?;
        grads.merge(&head_grads, 1.0)?;
        dfeats.push((j, dfeat));
    }

    let routed = model.sharing != Sharing::TaskDiagonals && model.factorized_layers() > 0;
    if routed {
        let t_blocks = t;
        let mut combined = Grads::new();
        let mut per_task = Vec::with_capacity(dfeats.len());
        for (j, dfeat) in &dfeats {
            let g = model.backward_trunk(&trunk, dfeat)?;
            combined.merge(&g, 1.0)?;
            per_task.push((*j, g));
        }
        let keys: Vec<ParamKey> = combined.iter().map(|(k, _)| *k).collect();
        for key in keys.into_iter().filter(|k| is_routed(model, k)) {
            let reference = combined.get(&key).expect("key listed above");
            let rank = match key.role {
                ParamRole::U => reference.shape()[reference.rank() - 1],
                _ => reference.shape()[0],
            };
            let blocks = block_ranges(rank, t_blocks);
            let mut routed_grad = reference.zeros_like();
            for (j, g) in &per_task {
                let src = g.get(&key).expect("every task pass covers every trunk parameter");
                let role = if key.role.is_diag() { ParamRole::V } else { key.role };
                add_block(&mut routed_grad, src, role, &blocks[*j])?;
            }
            combined.insert(key, routed_grad);
        }
        grads.merge(&combined, 1.0)?;
    } else if let Some((_, first)) = dfeats.first() {
        let mut dfeat = first.clone();
        for (_, d) in &dfeats[1..] {
            dfeat = dfeat.add(d)?;
        }
        grads.merge(&model.backward_trunk(&trunk, &dfeat)?, 1.0)?;
    }

    let mut penalty = 0.0;
    if let Some((lambda, form)) = frobenius {
        let (value, g) = frobenius_penalty(model, lambda, form)?;
        penalty = value;
        if lambda > 0.0 {
            grads.merge(&g, 1.0)?;
        }
    }
    Ok((StepOutput { task_losses, penalty }, grads))
}

/// Updates only the `task`-th diagonal of every factorized trunk layer, by
/// that task's own loss. Heads and all shared parameters stay bitwise
/// unchanged. Returns the task's loss before the update.
pub fn phase_a_step(
    model: &mut MtlModel,
    opt: &mut Optimizer,
    batch: &Dataset,
    task: usize,
    lr: f64,
) -> Result<f64> {
    let t = model.task_count();
    if task >= t {
        return Err(Error::Argument(format!("task {task} out of range (t = {t})")));
    }
    if model.sharing != Sharing::TaskDiagonals {
        return Err(Error::Structural("phase A needs one diagonal per task".into()));
    }
    let mut weights = vec![0.0; t];
    weights[task] = 1.0;
    let (out, mut grads) = compute_grads(model, batch, &weights, None)?;
    let loss = out.task_losses[task];
    if !loss.is_finite() {
        return Err(divergence("A", loss));
    }
    grads.retain(|k| k.site == Site::Trunk && k.role == ParamRole::Diag(task));
    apply(opt, model, &grads, lr, "A")?;
    Ok(loss)
}

/// Updates every parameter except the task diagonals on the weighted joint
/// loss plus the Frobenius penalty.
pub fn phase_b_step(
    model: &mut MtlModel,
    opt: &mut Optimizer,
    batch: &Dataset,
    weights: &[f64],
    frobenius: (f64, FrobeniusForm),
    lr: f64,
) -> Result<StepOutput> {
    let (out, mut grads) = compute_grads(model, batch, weights, Some(frobenius))?;
    check_finite("B", &out)?;
    grads.retain(|k| !k.role.is_diag());
    apply(opt, model, &grads, lr, "B")?;
    Ok(out)
}

/// Updates every parameter, diagonals included, on the weighted joint loss
/// plus the Frobenius penalty. Block-shared models route per-task gradients
/// into their blocks.
pub fn joint_step(
    model: &mut MtlModel,
    opt: &mut Optimizer,
    batch: &Dataset,
    weights: &[f64],
    frobenius: (f64, FrobeniusForm),
    lr: f64,
) -> Result<StepOutput> {
    let (out, grads) = compute_grads(model, batch, weights, Some(frobenius))?;
    check_finite("joint", &out)?;
    apply(opt, model, &grads, lr, "joint")?;
    Ok(out)
}

/// Summary of one epoch. Equality ignores `wall_ms`.
#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-task loss over the joint / phase-B batches.
    pub task_losses: Vec<f64>,
    /// Mean per-task loss over the phase-A batches (`fac` only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_a_losses: Option<Vec<f64>>,
    pub penalty: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_losses: Option<Vec<f64>>,
    pub wall_ms: f64,
}

impl PartialEq for EpochReport {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.task_losses == other.task_losses
            && self.phase_a_losses == other.phase_a_losses
            && self.penalty == other.penalty
            && self.lr == other.lr
            && self.val_losses == other.val_losses
    }
}

impl EpochReport {
    /// One-line JSON record for the metrics stream.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report is plain data")
    }
}

/// Accumulates batch means into dataset means.
struct Running {
    sums: Vec<f64>,
    penalty: f64,
    samples: usize,
}

impl Running {
    fn new(t: usize) -> Self {
        Self {
            sums: vec![0.0; t],
            penalty: 0.0,
            samples: 0,
        }
    }

    fn add(&mut self, losses: &[f64], penalty: f64, n: usize) {
        for (s, l) in self.sums.iter_mut().zip(losses) {
            *s += l * n as f64;
        }
        self.penalty += penalty * n as f64;
        self.samples += n;
    }

    fn means(&self) -> (Vec<f64>, f64) {
        let n = self.samples.max(1) as f64;
        (self.sums.iter().map(|s| s / n).collect(), self.penalty / n)
    }
}

/// Checks that the model's structure fits the mode.
pub fn check_mode(model: &MtlModel, mode: Mode) -> Result<()> {
    match mode.sharing() {
        None if model.factorized_layers() > 0 => Err(Error::Structural(
            "baseline mode expects a model without factorized layers".into(),
        )),
        Some(s) if s != model.sharing => Err(Error::Structural(format!(
            "mode {} needs {:?} factor sharing, model has {:?}",
            mode.as_str(),
            s,
            model.sharing
        ))),
        _ => Ok(()),
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Divergence { phase, loss, .. } => Error::Divergence {
            epoch,
            batch,
            phase,
            loss,
        },
        other => other,
    }
}

/// One epoch of training in the configured mode. `epoch` seeds the subset
/// and the batch order; `lr_scale` multiplies both learning rates.
pub fn train_epoch(
    model: &mut MtlModel,
    opt: &mut Optimizer,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    let start = Instant::now();
    check_mode(model, cfg.mode)?;
    let t = model.task_count();
    cfg.validate(t, data.len())?;
    let weights = cfg.loss_weights.resolve(t)?;
    let lr = cfg.lr * cfg.lr_scale(epoch);
    let lr_a = cfg.lr_phase_a() * cfg.lr_scale(epoch);
    let frob = (cfg.frobenius_decay, cfg.frobenius_form);
    let order = subset_sample(data.len(), 1.0, derive_seed(cfg.seed, ORDER_STREAM), epoch)?;
    let mut main = Running::new(t);
    let mut phase_a = Running::new(t);

    let mut run_phase_a = |model: &mut MtlModel, opt: &mut Optimizer, batch: &Dataset, b: usize| -> Result<()> {
        let mut losses = vec![0.0; t];
        for (j, l) in losses.iter_mut().enumerate() {
            *l = phase_a_step(model, opt, batch, j, lr_a).map_err(|e| with_context(e, epoch, b))?;
        }
        phase_a.add(&losses, 0.0, batch.len());
        Ok(())
    };

    match (cfg.mode, cfg.alternation) {
        (Mode::Fac, Alternation::PerEpoch) => {
            let subset = subset_sample(data.len(), cfg.subset_fraction, derive_seed(cfg.seed, SUBSET_STREAM), epoch)?;
            for (b, idx) in subset.chunks(cfg.batch_size).enumerate() {
                run_phase_a(model, opt, &data.batch(idx)?, b)?;
            }
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.batch(idx)?;
                let out = phase_b_step(model, opt, &batch, &weights, frob, lr).map_err(|e| with_context(e, epoch, b))?;
                main.add(&out.task_losses, out.penalty, batch.len());
            }
        }
        (Mode::Fac, Alternation::PerBatch) => {
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.batch(idx)?;
                run_phase_a(model, opt, &batch, b)?;
                let out = phase_b_step(model, opt, &batch, &weights, frob, lr).map_err(|e| with_context(e, epoch, b))?;
                main.add(&out.task_losses, out.penalty, batch.len());
            }
        }
        _ => {
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.batch(idx)?;
                let out = joint_step(model, opt, &batch, &weights, frob, lr).map_err(|e| with_context(e, epoch, b))?;
                main.add(&out.task_losses, out.penalty, batch.len());
            }
        }
    }

    let (task_losses, penalty) = main.means();
    Ok(EpochReport {
        epoch,
        task_losses,
        phase_a_losses: (cfg.mode == Mode::Fac).then(|| phase_a.means().0),
        penalty,
        lr,
        val_losses: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Mean per-task losses of the contracted forward over `data`.
pub fn evaluate_losses(model: &MtlModel, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let t = model.task_count();
    let mut acc = Running::new(t);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let outs = model.forward(&batch.inputs, ForwardMode::Contracted)?;
        let losses = outs
            .iter()
            .zip(&batch.targets)
            .zip(&model.tasks)
            .map(|((o, y), task)| task_loss(task.loss, o, y).map(|l| l.value))
            .collect::<Result<Vec<_>>>()?;
        acc.add(&losses, 0.0, batch.len());
    }
    Ok(acc.means().0)
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub reports: Vec<EpochReport>,
    pub stopped_early: bool,
}

/// Trains for `cfg.epochs` epochs (fewer with patience-based early
/// stopping on the weighted validation loss), calling `on_epoch` after
/// each one.
pub fn fit(
    model: &mut MtlModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<FitSummary> {
    check_mode(model, cfg.mode)?;
    cfg.validate(model.task_count(), train.len())?;
    let weights = cfg.loss_weights.resolve(model.task_count())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut report = train_epoch(model, &mut opt, train, cfg, epoch)?;
        if let Some(val) = val {
            let losses = evaluate_losses(model, val, cfg.batch_size)?;
            let total: f64 = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
            report.val_losses = Some(losses);
            if total < best {
                best = total;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        on_epoch(&report)?;
        reports.push(report);
        if cfg.patience.is_some_and(|p| val.is_some() && stale >= p) {
            return Ok(FitSummary {
                reports,
                stopped_early: true,
            });
        }
    }
    Ok(FitSummary {
        reports,
        stopped_early: false,
    })
}
