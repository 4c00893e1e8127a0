//! Linear multitask regression with teachers that share a low-rank factor.

use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{LossKind, TaskHead};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug)]
pub struct TeacherConfig {
    pub n: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub tasks: usize,
    /// Rank of the factor every teacher shares.
    pub rank: usize,
    /// Standard deviation of the additive target noise.
    pub noise: f64,
    /// All tasks use the same teacher.
    pub identical: bool,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            n: 256,
            input_dim: 8,
            output_dim: 4,
            tasks: 2,
            rank: 3,
            noise: 0.0,
            identical: false,
            seed: 0,
            dtype: DType::F64,
        }
    }
}

pub struct LinearTeacher {
    pub data: Dataset,
    /// Per-task teacher matrices, stored (input_dim × output_dim) like
    /// [`crate::layers::Linear`] weights: `y = x · A`.
    pub teachers: Vec<Tensor>,
}

pub fn teacher_tasks(tasks: usize, output_dim: usize) -> Vec<TaskHead> {
    vec![
        TaskHead {
            loss: LossKind::Mse,
            channels: output_dim,
        };
        tasks
    ]
}

fn gaussian(shape: &[usize], std: f64, seed: u64) -> Result<Tensor> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, DType::F64, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

/// Inputs `x ~ N(0, I)`; targets `y_j = x·B·C_j + noise` with a shared
/// `B` (input_dim × rank) and per-task `C_j` (rank × output_dim), scaled
/// so targets have roughly unit variance.
pub fn gen_linear_teacher(cfg: &TeacherConfig) -> Result<LinearTeacher> {
    if cfg.rank == 0 || cfg.rank > cfg.input_dim {
        return Err(Error::Argument(format!(
            "teacher rank must lie in 1..={}, got {}",
            cfg.input_dim, cfg.rank
        )));
    }
    if cfg.n == 0 || cfg.tasks == 0 || cfg.output_dim == 0 {
        return Err(Error::Argument("n, tasks and output_dim must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Argument(format!("noise must be ≥ 0, got {}", cfg.noise)));
    }
    let b = gaussian(&[cfg.input_dim, cfg.rank], (1.0 / cfg.rank as f64).sqrt(), derive_seed(cfg.seed, 1))?;
    let teachers = (0..cfg.tasks)
        .map(|j| {
            let stream = if cfg.identical { 0 } else { j as u64 };
            let c = gaussian(&[cfg.rank, cfg.output_dim], 1.0, derive_seed(cfg.seed, 100 + stream))?;
            b.matmul(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = gaussian(&[cfg.n, cfg.input_dim], 1.0, derive_seed(cfg.seed, 2))?;
    let targets = teachers
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let clean = x.matmul(a)?;
            if cfg.noise == 0.0 {
                return Ok(clean);
            }
            clean.add(&gaussian(clean.shape(), cfg.noise, derive_seed(cfg.seed, 200 + j as u64))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearTeacher {
        data: Dataset::new(x, targets)?.to_dtype(cfg.dtype),
        teachers: teachers.iter().map(|a| a.cast(cfg.dtype)).collect(),
    })
}
