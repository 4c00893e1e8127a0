//! Training dynamics on the toy datasets, plus dataset and metric sanity.

use opmt::bench::metrics::{angle_deg, depth_errors, segmentation_scores};
use opmt::bench::{gen_linear_teacher, gen_shapes_dataset, teacher_tasks, TeacherConfig};
use opmt::data::Dataset;
use opmt::layers::arch::{factorize_model, FactorizeOptions, ModelSpec};
use opmt::layers::{FactorizedLinear, Layer, Linear, LossKind, MtlModel, ParamKey, ParamRole, Sharing, TaskHead};
use opmt::linalg::InitScheme;
use opmt::rng::derive_seed;
use opmt::trainer::{
    evaluate_losses, fit, joint_step, phase_a_step, subset_sample, task_loss, Mode, Optimizer, OptimizerKind,
    TrainConfig, ORDER_STREAM,
};
use opmt::{DType, Tensor};

fn scalar(v: f64) -> Tensor {
    Tensor::from_f64(&[1, 1], vec![v]).unwrap()
}

#[test]
fn scalar_sgd_step_matches_closed_form() {
    // y = x·u·d·v·w, squared error against 0: dL/dd = 2·y·x·u·v·w.
    let (x, u, d, v, w) = (1.0, 2.0, 0.5, 1.0, 1.0);
    let trunk = vec![Layer::FactorizedLinear(
        FactorizedLinear::new(
            scalar(u),
            vec![Tensor::from_f64(&[1], vec![d]).unwrap()],
            scalar(v),
            None,
        )
        .unwrap(),
    )];
    let heads = vec![vec![Layer::Linear(Linear::new(scalar(w), None).unwrap())]];
    let tasks = vec![TaskHead {
        loss: LossKind::Mse,
        channels: 1,
    }];
    let mut model = MtlModel::new(trunk, heads, tasks, vec![1], Sharing::TaskDiagonals).unwrap();
    let batch = Dataset::new(scalar(x), vec![scalar(0.0)]).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.0);
    let loss = phase_a_step(&mut model, &mut opt, &batch, 0, 0.1).unwrap();
    let y = x * u * d * v * w;
    assert_eq!(loss, y * y);
    let grad = 2.0 * y * x * u * v * w;
    let key = ParamKey::trunk(0, ParamRole::Diag(0));
    assert_eq!(model.param(&key).unwrap().get(0), d - 0.1 * grad);
    assert_eq!(model.param(&ParamKey::trunk(0, ParamRole::U)).unwrap().get(0), u);
}

fn teacher_model(tasks: usize, identical: bool, noise: f64, seed: u64) -> (MtlModel, Dataset) {
    let teacher = gen_linear_teacher(&TeacherConfig {
        tasks,
        identical,
        noise,
        seed,
        ..TeacherConfig::default()
    })
    .unwrap();
    let spec = ModelSpec::Mlp {
        hidden: vec![8],
        relu: false,
    };
    let base = spec
        .build_baseline(&[8], &teacher_tasks(tasks, 4), InitScheme::KaimingUniform, seed, DType::F64)
        .unwrap();
    let fac = factorize_model(&base, &spec.factorized_indices(&base), &FactorizeOptions::default()).unwrap();
    (fac, teacher.data)
}

#[test]
fn fac_no_iter_is_plain_joint_training() {
    let (model, data) = teacher_model(1, false, 0.1, 3);
    let cfg = TrainConfig {
        mode: Mode::FacNoIter,
        epochs: 3,
        seed: 9,
        dtype: DType::F64,
        ..TrainConfig::default()
    };
    let mut fitted = model.clone();
    let summary = fit(&mut fitted, &data, None, &cfg, |_| Ok(())).unwrap();

    let mut manual = model;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    for (epoch, report) in summary.reports.iter().enumerate() {
        let order = subset_sample(data.len(), 1.0, derive_seed(cfg.seed, ORDER_STREAM), epoch).unwrap();
        let (mut total, mut seen) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.batch(idx).unwrap();
            let out = joint_step(
                &mut manual,
                &mut opt,
                &batch,
                &[1.0],
                (cfg.frobenius_decay, cfg.frobenius_form),
                cfg.lr,
            )
            .unwrap();
            total += out.task_losses[0] * idx.len() as f64;
            seen += idx.len();
        }
        let mean = total / seen as f64;
        assert!((mean - report.task_losses[0]).abs() <= 1e-6, "epoch {epoch}");
    }
    assert!(manual == fitted);
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn alternating_training_reduces_teacher_loss() {
    let (mut model, data) = teacher_model(1, false, 0.0, 4);
    let cfg = TrainConfig {
        mode: Mode::Fac,
        epochs: 20,
        subset_fraction: 1.0,
        lr: 3e-3,
        dtype: DType::F64,
        ..TrainConfig::default()
    };
    let start = evaluate_losses(&model, &data, 32).unwrap()[0];
    let summary = fit(&mut model, &data, None, &cfg, |_| Ok(())).unwrap();
    let losses: Vec<f64> = summary.reports.iter().map(|r| r.task_losses[0]).collect();
    let smooth = moving_average(&losses, 3);
    assert!(smooth.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
    assert!(*losses.last().unwrap() < 0.5 * start);
}

#[test]
fn identical_teachers_match_single_task_training() {
    let cfg = TrainConfig {
        mode: Mode::Fac,
        epochs: 40,
        lr: 3e-3,
        dtype: DType::F64,
        ..TrainConfig::default()
    };
    let (mut single, data1) = teacher_model(1, true, 0.5, 5);
    fit(&mut single, &data1, None, &cfg, |_| Ok(())).unwrap();
    let reference = evaluate_losses(&single, &data1, 32).unwrap()[0];

    let (mut joint, data2) = teacher_model(2, true, 0.5, 5);
    fit(&mut joint, &data2, None, &cfg, |_| Ok(())).unwrap();
    for (j, l) in evaluate_losses(&joint, &data2, 32).unwrap().into_iter().enumerate() {
        assert!((l - reference).abs() <= 0.05 * reference, "task {j}: {l} vs {reference}");
    }
}

#[test]
fn noiseless_teacher_is_exactly_its_own_targets() {
    let t = gen_linear_teacher(&TeacherConfig {
        tasks: 3,
        ..TeacherConfig::default()
    })
    .unwrap();
    for (a, y) in t.teachers.iter().zip(&t.data.targets) {
        let pred = t.data.inputs.matmul(a).unwrap();
        assert_eq!(task_loss(LossKind::Mse, &pred, y).unwrap().value, 0.0);
    }
}

#[test]
fn every_class_appears_in_a_thousand_scenes() {
    let classes = 4;
    let data = gen_shapes_dataset(1000, 16, classes, 0, DType::F32).unwrap();
    let mut hist = vec![0usize; classes];
    for v in data.targets[0].to_f64_vec() {
        hist[v as usize] += 1;
    }
    assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
}

#[test]
fn perfect_predictions_score_perfectly() {
    let gt = [0, 1, 2, 2, 1, 0, 3];
    assert_eq!(segmentation_scores(&gt, &gt, 4), (1.0, 1.0));
    let depth = [0.5, 1.0, 2.5];
    assert_eq!(depth_errors(&depth, &depth), (0.0, 0.0));
    assert!(angle_deg(&[0.0, 0.6, 0.8], &[0.0, 0.6, 0.8]) < 1e-6);
}

#[test]
fn miou_ignores_label_permutation() {
    let pred = [0, 1, 1, 2, 0, 2, 2, 1];
    let gt = [0, 1, 2, 2, 0, 1, 2, 1];
    let relabel = |v: &[usize]| v.iter().map(|&c| (c + 1) % 3).collect::<Vec<_>>();
    let a = segmentation_scores(&pred, &gt, 3);
    let b = segmentation_scores(&relabel(&pred), &relabel(&gt), 3);
    assert!((a.0 - b.0).abs() < 1e-15 && a.1 == b.1);
}
