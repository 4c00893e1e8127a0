//! Task metrics: segmentation (mIoU, pixel accuracy), depth (absolute and
//! relative error), surface normals (angular error) and plain MSE.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ForwardMode, LossKind, MtlModel};

/// Depth values below this are clamped in the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-3;
/// Angle thresholds (degrees) reported by the normal metrics.
pub const ANGLE_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskMetrics {
    Segmentation {
        miou: f64,
        pixel_accuracy: f64,
    },
    Depth {
        abs_err: f64,
        rel_err: f64,
    },
    Normals {
        mean_angle: f64,
        median_angle: f64,
        within_11_25: f64,
        within_22_5: f64,
        within_30: f64,
    },
    Regression {
        mse: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    pub fn segmentation(&self) -> Option<(f64, f64)> {
        self.tasks.iter().find_map(|t| match *t {
            TaskMetrics::Segmentation { miou, pixel_accuracy } => Some((miou, pixel_accuracy)),
            _ => None,
        })
    }

    pub fn depth(&self) -> Option<(f64, f64)> {
        self.tasks.iter().find_map(|t| match *t {
            TaskMetrics::Depth { abs_err, rel_err } => Some((abs_err, rel_err)),
            _ => None,
        })
    }

    pub fn mean_angle(&self) -> Option<f64> {
        self.tasks.iter().find_map(|t| match *t {
            TaskMetrics::Normals { mean_angle, .. } => Some(mean_angle),
            _ => None,
        })
    }
}

/// Per-class intersection/union tallies.
#[derive(Clone, Debug)]
pub struct Confusion {
    intersect: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
    correct: u64,
    total: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            intersect: vec![0; classes],
            pred: vec![0; classes],
            gt: vec![0; classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, pred: usize, gt: usize) {
        self.pred[pred] += 1;
        self.gt[gt] += 1;
        if pred == gt {
            self.intersect[gt] += 1;
            self.correct += 1;
        }
        self.total += 1;
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let (mut sum, mut present) = (0.0, 0usize);
        for c in 0..self.gt.len() {
            let union = self.pred[c] + self.gt[c] - self.intersect[c];
            if union > 0 {
                sum += self.intersect[c] as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// `(miou, pixel_accuracy)` of two label maps.
pub fn segmentation_scores(pred: &[usize], gt: &[usize], classes: usize) -> (f64, f64) {
    let mut c = Confusion::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        c.add(p, g);
    }
    (c.miou(), c.pixel_accuracy())
}

/// `(abs_err, rel_err)` of depth predictions.
pub fn depth_errors(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let (mut abs, mut rel) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let d = (p - g).abs();
        abs += d;
        rel += d / g.max(REL_ERR_FLOOR);
    }
    (abs / n, rel / n)
}

/// Angle in degrees between two vectors; a zero vector counts as
/// orthogonal to everything.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (
        a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        b.iter().map(|x| x * x).sum::<f64>().sqrt(),
    );
    if na == 0.0 || nb == 0.0 {
        return 90.0;
    }
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Summary statistics of per-pixel angular errors.
pub fn angle_stats(angles: &mut [f64]) -> TaskMetrics {
    let n = angles.len();
    if n == 0 {
        return TaskMetrics::Normals {
            mean_angle: 0.0,
            median_angle: 0.0,
            within_11_25: 0.0,
            within_22_5: 0.0,
            within_30: 0.0,
        };
    }
    angles.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        angles[n / 2]
    } else {
        0.5 * (angles[n / 2 - 1] + angles[n / 2])
    };
    let within = |t: f64| angles.iter().filter(|&&a| a < t).count() as f64 / n as f64;
    TaskMetrics::Normals {
        mean_angle: angles.iter().sum::<f64>() / n as f64,
        median_angle: median,
        within_11_25: within(ANGLE_THRESHOLDS[0]),
        within_22_5: within(ANGLE_THRESHOLDS[1]),
        within_30: within(ANGLE_THRESHOLDS[2]),
    }
}

enum Acc {
    Seg(Confusion),
    Depth { abs: f64, rel: f64, n: usize },
    Normals(Vec<f64>),
    Mse { sum: f64, n: usize },
}

fn check_target(task: usize, loss: LossKind, pred: &[usize], target: &[usize]) -> Result<()> {
    let ok = match loss {
        LossKind::CrossEntropy => pred.len() >= 2 && target.len() + 1 == pred.len() && target[1..] == pred[2..] && target[0] == pred[0],
        _ => pred == target,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Structural(format!(
            "task {task} ({}) produces {pred:?} but targets are {target:?}",
            loss.as_str()
        )))
    }
}

/// Evaluates the contracted forward of `model` on every sample of `data`.
pub fn evaluate(model: &MtlModel, data: &Dataset) -> Result<MetricReport> {
    if data.task_count() != model.task_count() {
        return Err(Error::Structural(format!(
            "model has {} heads, dataset has {} targets",
            model.task_count(),
            data.task_count()
        )));
    }
    let mut accs: Vec<Acc> = model
        .tasks
        .iter()
        .map(|t| match t.loss {
            LossKind::CrossEntropy => Acc::Seg(Confusion::new(t.channels)),
            LossKind::L1 => Acc::Depth { abs: 0.0, rel: 0.0, n: 0 },
            LossKind::Cosine => Acc::Normals(Vec::new()),
            LossKind::Mse => Acc::Mse { sum: 0.0, n: 0 },
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?.to_dtype(model.dtype());
        let outs = model.forward(&batch.inputs, ForwardMode::Contracted)?;
        for (j, ((out, target), acc)) in outs.iter().zip(&batch.targets).zip(&mut accs).enumerate() {
            check_target(j, model.tasks[j].loss, out.shape(), target.shape())?;
            let (p, g) = (out.to_f64_vec(), target.to_f64_vec());
            let (b, c) = (out.shape()[0], out.shape()[1]);
            let plane = out.len() / (b * c);
            match acc {
                Acc::Seg(conf) => {
                    for s in 0..b {
                        for i in 0..plane {
                            let mut best = 0;
                            for ch in 1..c {
                                if p[(s * c + ch) * plane + i] > p[(s * c + best) * plane + i] {
                                    best = ch;
                                }
                            }
                            let label = g[s * plane + i];
                            if !(label >= 0.0 && label.fract() == 0.0 && (label as usize) < c) {
                                return Err(Error::Structural(format!(
                                    "task {j}: class label {label} outside 0..{c}"
                                )));
                            }
                            conf.add(best, label as usize);
                        }
                    }
                }
                Acc::Depth { abs, rel, n } => {
                    let (a, r) = depth_errors(&p, &g);
                    *abs += a * p.len() as f64;
                    *rel += r * p.len() as f64;
                    *n += p.len();
                }
                Acc::Normals(angles) => {
                    let mut u = vec![0.0; c];
                    let mut v = vec![0.0; c];
                    for s in 0..b {
                        for i in 0..plane {
                            for ch in 0..c {
                                u[ch] = p[(s * c + ch) * plane + i];
                                v[ch] = g[(s * c + ch) * plane + i];
                            }
                            angles.push(angle_deg(&u, &v));
                        }
                    }
                }
                Acc::Mse { sum, n } => {
                    *sum += p.iter().zip(&g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    *n += p.len();
                }
            }
        }
    }
    let tasks = accs
        .into_iter()
        .map(|acc| match acc {
            Acc::Seg(c) => TaskMetrics::Segmentation {
                miou: c.miou(),
                pixel_accuracy: c.pixel_accuracy(),
            },
            Acc::Depth { abs, rel, n } => TaskMetrics::Depth {
                abs_err: abs / n.max(1) as f64,
                rel_err: rel / n.max(1) as f64,
            },
            Acc::Normals(mut a) => angle_stats(&mut a),
            Acc::Mse { sum, n } => TaskMetrics::Regression { mse: sum / n.max(1) as f64 },
        })
        .collect();
    Ok(MetricReport {
        samples: data.len(),
        tasks,
    })
}

/// Three-task aggregate per run: `z(mIoU) + z(pixel acc) − z(abs err)`,
/// each metric standardised over the pooled runs. Runs lacking a
/// segmentation or depth task score `NaN`.
pub fn aggregate_scores(reports: &[MetricReport]) -> Vec<f64> {
    let cols: Vec<[f64; 3]> = reports
        .iter()
        .map(|r| match (r.segmentation(), r.depth()) {
            (Some((m, a)), Some((e, _))) => [m, a, e],
            _ => [f64::NAN; 3],
        })
        .collect();
    let n = cols.len() as f64;
    let z: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let mean = cols.iter().map(|c| c[k]).sum::<f64>() / n;
            let var = cols.iter().map(|c| (c[k] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    let std = |k: usize, x: f64| {
        let (m, s) = z[k];
        if s > 0.0 {
            (x - m) / s
        } else {
            0.0
        }
    };
    cols.iter()
        .map(|c| std(0, c[0]) + std(1, c[1]) - std(2, c[2]))
        .collect()
}
