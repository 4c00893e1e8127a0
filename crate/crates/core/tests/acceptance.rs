//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the lines always reach
//! stdout. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use opmt::bench::experiment::{build_model, DatasetSpec, ExperimentConfig, ExperimentResult};
use opmt::bench::{aggregate_scores, gen_linear_teacher, results_table, run_experiment, TeacherConfig};
use opmt::layers::arch::{factorize_model, FactorizeOptions, ModelSpec};
use opmt::layers::{
    ConvGeometry, FactorInit, FactorizedConv2d, FactorizedLinear, ForwardMode, Grads, Layer, LossKind, MtlModel,
    ParamRole, Sharing, Site, TaskHead,
};
use opmt::linalg::{svd, InitScheme};
use opmt::model_io::{
    contract_model, count_flops, count_params, load_model, save_model, verify_equivalence, TensorArchive,
};
use opmt::rng::{derive_seed, seeded, Rng};
use opmt::trainer::{
    evaluate_losses, joint_step, layer_penalty, phase_a_step, phase_b_step, subset_sample, FrobeniusForm, Mode,
    Optimizer, OptimizerKind, TrainConfig,
};
use opmt::{DType, Tensor};

// Tolerances and sizes.
const C1_MODELS: usize = 50;
const C1_TOL_F32: f64 = 1e-5;
const C1_TOL_F64: f64 = 1e-10;
const C2_CASES: usize = 200;
const C2_REL_TOL: f64 = 1e-4;
/// Floor on the relative-error denominator, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
const C2_REL_FLOOR: f64 = 1e-6;
const C2_STEP: f64 = 1e-6;
const C3_REL_TOL: f64 = 1e-12;
const C4_ARCHS: usize = 10;
const C5_CASES: usize = 100;
const C5_REL_TOL: f64 = 1e-6;
const C6_EPOCHS: usize = 5;
const C7_WEIGHT_DECAY: f64 = 0.01;
const C8_CASES: usize = 100;
const C8_TOL: f64 = 1e-8;
const C9_SEEDS: [u64; 3] = [0, 1, 2];
const C9_EPOCHS: usize = 30;
const C9_MIOU_SLACK: f64 = 0.01;
const C9_BUDGET_S: f64 = 20.0 * 60.0;
const C10_LOSS_TOL: f64 = 1e-5;
const C11_MODELS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(shape: &[usize], dtype: DType, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, dtype, |_| StandardNormal.sample(rng)).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, dtype, |_| rng.random_range(lo..hi)).unwrap()
}

fn with_element(t: &Tensor, index: usize, value: f64) -> Tensor {
    let mut v = t.to_f64_vec();
    v[index] = value;
    Tensor::from_f64(t.shape(), v).unwrap().cast(t.dtype())
}

// ---------------------------------------------------------------- models

fn random_tasks(t: usize, rng: &mut Rng) -> Vec<TaskHead> {
    (0..t)
        .map(|_| match rng.random_range(0..4) {
            0 => TaskHead {
                loss: LossKind::CrossEntropy,
                channels: rng.random_range(2..=4),
            },
            1 => TaskHead {
                loss: LossKind::L1,
                channels: 1,
            },
            2 => TaskHead {
                loss: LossKind::Cosine,
                channels: 3,
            },
            _ => TaskHead {
                loss: LossKind::Mse,
                channels: rng.random_range(1..=3),
            },
        })
        .collect()
}

/// Random small architecture: conv trunks on even draws, MLPs on odd.
fn random_arch(conv: bool, rng: &mut Rng) -> (ModelSpec, Vec<usize>, Vec<TaskHead>) {
    let t = rng.random_range(1..=3);
    let tasks = random_tasks(t, rng);
    if conv {
        let depth = rng.random_range(2..=4);
        let widths = (0..depth).map(|_| rng.random_range(2..=6)).collect();
        let size = [8, 12][rng.random_range(0..2)];
        (
            ModelSpec::SegnetMini { widths },
            vec![rng.random_range(1..=3), size, size],
            tasks,
        )
    } else {
        let depth = rng.random_range(1..=3);
        let hidden = (0..depth).map(|_| rng.random_range(2..=7)).collect();
        (
            ModelSpec::Mlp {
                hidden,
                relu: rng.random_bool(0.5),
            },
            vec![rng.random_range(2..=8)],
            tasks,
        )
    }
}

const SHARINGS: [Sharing; 3] = [Sharing::TaskDiagonals, Sharing::UvBlocks, Sharing::MBlocks];

/// Baseline plus a factorized copy whose factors, diagonals and biases are
/// perturbed away from their initial values.
fn random_model_pair(i: usize, dtype: DType, rng: &mut Rng) -> (ModelSpec, MtlModel, MtlModel) {
    let (spec, input, tasks) = random_arch(i.is_multiple_of(2), rng);
    let seed = rng.random();
    let base = spec
        .build_baseline(&input, &tasks, InitScheme::KaimingUniform, seed, dtype)
        .unwrap();
    let opts = FactorizeOptions {
        init: if rng.random_bool(0.5) {
            FactorInit::Spectral
        } else {
            FactorInit::IdentityDiag
        },
        sharing: SHARINGS[rng.random_range(0..3)],
        extra_rank: rng.random_range(0..=2),
        scheme: InitScheme::KaimingUniform,
        seed: rng.random(),
    };
    let mut fac = factorize_model(&base, &spec.factorized_indices(&base), &opts).unwrap();
    for (key, t) in fac.params_mut() {
        let shape = t.shape().to_vec();
        let noise = match key.role {
            ParamRole::Diag(_) => uniform(&shape, 0.5, 1.5, dtype, rng),
            ParamRole::Bias => {
                *t = t.add(&gaussian(&shape, dtype, rng).scale(0.1)).unwrap();
                continue;
            }
            _ => uniform(&shape, 0.8, 1.2, dtype, rng),
        };
        *t = t.hadamard(&noise).unwrap();
    }
    (spec, base, fac)
}

// ------------------------------------------------------------ criterion 1

fn c1_contraction() -> Outcome {
    // The factorized forward (contract on the fly) decides the verdict. The
    // sequential three-op path must also pass in f64; in f32 it differs from
    // the compact model by a few ulps of the output, which is reported only.
    let mut rng = seeded(101);
    let mut worst = [0.0f64; 2];
    let mut seq = [0.0f64; 2];
    let mut seq_rel_f32 = 0.0f64;
    let mut failures = 0;
    for i in 0..C1_MODELS {
        for (d, (dtype, tol)) in [(DType::F32, C1_TOL_F32), (DType::F64, C1_TOL_F64)].into_iter().enumerate() {
            let (_, _, fac) = random_model_pair(i, dtype, &mut rng);
            let compact = contract_model(&fac).unwrap();
            let seed = rng.random();
            let r = verify_equivalence(&fac, &compact, 8, tol, seed, ForwardMode::Contracted).unwrap();
            let s = verify_equivalence(&fac, &compact, 8, tol, seed, ForwardMode::Sequential).unwrap();
            worst[d] = worst[d].max(r.max_abs);
            seq[d] = seq[d].max(s.max_abs);
            if dtype == DType::F32 {
                seq_rel_f32 = seq_rel_f32.max(s.max_rel);
            }
            failures += usize::from(!r.passed) + usize::from(dtype == DType::F64 && !s.passed);
        }
    }
    outcome(
        failures == 0,
        format!(
            "{C1_MODELS} models × {{f32, f64}}: worst max-abs {:.2e} (f32, tol {C1_TOL_F32:e}), {:.2e} (f64, tol {C1_TOL_F64:e}); \
             sequential factors {:.2e} (f64), f32 info {:.2e} abs / {:.2e} rel; {failures} failures",
            worst[0], worst[1], seq[1], seq[0], seq_rel_f32
        ),
    )
}

// ------------------------------------------------------------ criterion 2

fn random_factorized_layer(rng: &mut Rng) -> (Layer, Tensor) {
    let dtype = DType::F64;
    let t = rng.random_range(1..=3);
    let diags = |r: usize, rng: &mut Rng| -> Vec<Tensor> {
        (0..t)
            .map(|_| {
                let sign = if rng.random_bool(0.2) { -1.0 } else { 1.0 };
                uniform(&[r], 0.5, 1.5, dtype, rng).scale(sign)
            })
            .collect()
    };
    if rng.random_bool(0.5) {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let r = m.min(n) + rng.random_range(0..=2);
        let layer = FactorizedLinear::new(
            gaussian(&[m, r], dtype, rng),
            diags(r, rng),
            gaussian(&[r, n], dtype, rng),
            rng.random_bool(0.7).then(|| gaussian(&[n], dtype, rng)),
        )
        .unwrap();
        let batch = rng.random_range(1..=3);
        (Layer::FactorizedLinear(layer), gaussian(&[batch, m], dtype, rng))
    } else {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let r = (co * k).min(ci * k) + rng.random_range(0..=1);
        let mut h: usize = k + stride * rng.random_range(1..=3usize);
        h = h.saturating_sub(2 * padding).max(k);
        while !(h + 2 * padding - k).is_multiple_of(stride) {
            h += 1;
        }
        let layer = FactorizedConv2d::new(
            gaussian(&[co, k, r], dtype, rng),
            diags(r, rng),
            gaussian(&[r, k, ci], dtype, rng),
            rng.random_bool(0.7).then(|| gaussian(&[co], dtype, rng)),
            ConvGeometry { stride, padding },
        )
        .unwrap();
        (Layer::FactorizedConv2d(layer), gaussian(&[2, ci, h, h], dtype, rng))
    }
}

fn set_param(layer: &mut Layer, role: ParamRole, t: Tensor) {
    for (r, p) in layer.params_mut() {
        if r == role {
            *p = t;
            return;
        }
    }
    panic!("layer has no {role:?}");
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(C2_REL_FLOOR)
}

/// Worst relative error of `grads` (and of `dx`, if given) against central
/// differences of `f`.
fn fd_check(
    layer: &Layer,
    x: &Tensor,
    grads: &[(ParamRole, Tensor)],
    dx: Option<&Tensor>,
    f: &dyn Fn(&Layer, &Tensor) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (role, g) in grads {
        let base = layer.params().into_iter().find(|(r, _)| r == role).unwrap().1.clone();
        for i in 0..base.len() {
            let v = base.get(i);
            let mut plus = layer.clone();
            set_param(&mut plus, *role, with_element(&base, i, v + C2_STEP));
            let mut minus = layer.clone();
            set_param(&mut minus, *role, with_element(&base, i, v - C2_STEP));
            let num = (f(&plus, x) - f(&minus, x)) / (2.0 * C2_STEP);
            worst = worst.max(rel_err(g.get(i), num));
            coords += 1;
        }
    }
    if let Some(dx) = dx {
        for i in 0..x.len() {
            let v = x.get(i);
            let num = (f(layer, &with_element(x, i, v + C2_STEP)) - f(layer, &with_element(x, i, v - C2_STEP)))
                / (2.0 * C2_STEP);
            worst = worst.max(rel_err(dx.get(i), num));
            coords += 1;
        }
    }
    (worst, coords)
}

fn c2_gradients() -> Outcome {
    let mut rng = seeded(202);
    let (mut worst_fwd, mut worst_pen) = (0.0f64, 0.0f64);
    let mut coords = 0;
    for case in 0..C2_CASES {
        let (layer, x) = random_factorized_layer(&mut rng);
        let y = layer.forward(&x, ForwardMode::Contracted).unwrap();
        let dy = gaussian(y.shape(), DType::F64, &mut rng);

        let (out, cache) = layer.forward_train(&x).unwrap();
        assert!(out.bitwise_eq(&y) || out.max_abs_diff(&y).unwrap() < 1e-12);
        let (dx, grads) = layer.backward(&cache, &dy, true).unwrap();
        let roles: Vec<ParamRole> = grads.iter().map(|(r, _)| *r).collect();
        let expect_diags = layer.task_diag_count().unwrap();
        assert!(roles.contains(&ParamRole::U) && roles.contains(&ParamRole::V));
        assert_eq!(roles.iter().filter(|r| r.is_diag()).count(), expect_diags);
        let loss = |l: &Layer, x: &Tensor| -> f64 {
            let y = l.forward(x, ForwardMode::Contracted).unwrap();
            y.hadamard(&dy).unwrap().sum()
        };
        let (w, c) = fd_check(&layer, &x, &grads, dx.as_ref(), &loss);
        worst_fwd = worst_fwd.max(w);
        coords += c;

        let lambda = rng.random_range(1e-3..1.0);
        let form = if case % 2 == 0 {
            FrobeniusForm::Product
        } else {
            FrobeniusForm::PerFactor
        };
        let (_, pgrads) = layer_penalty(&layer, lambda, form).unwrap().unwrap();
        let pen = |l: &Layer, _: &Tensor| layer_penalty(l, lambda, form).unwrap().unwrap().0;
        let (w, c) = fd_check(&layer, &x, &pgrads, None, &pen);
        worst_pen = worst_pen.max(w);
        coords += c;
    }
    outcome(
        worst_fwd <= C2_REL_TOL && worst_pen <= C2_REL_TOL,
        format!(
            "{C2_CASES} cases, {coords} coordinates (u, v, diagonals, bias, input; penalty): worst rel err {worst_fwd:.2e} layer, {worst_pen:.2e} penalty (tol {C2_REL_TOL:e})"
        ),
    )
}

// ------------------------------------------------------------ criterion 3

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn c3_order_invariance() -> Outcome {
    let mut rng = seeded(303);
    let dtype = DType::F64;
    let mut worst = 0.0f64;
    let mut orders = 0;
    for case in 0..20 {
        let diags: Vec<Tensor> = (0..3).map(|_| uniform(&[6], -2.0, 2.0, dtype, &mut rng)).collect();
        let conv = case % 2 == 1;
        let (u, v, x) = if conv {
            (
                gaussian(&[3, 3, 6], dtype, &mut rng),
                gaussian(&[6, 3, 2], dtype, &mut rng),
                gaussian(&[2, 2, 5, 5], dtype, &mut rng),
            )
        } else {
            (
                gaussian(&[5, 6], dtype, &mut rng),
                gaussian(&[6, 4], dtype, &mut rng),
                gaussian(&[3, 5], dtype, &mut rng),
            )
        };
        let run = |order: &[usize]| -> Tensor {
            let d: Vec<Tensor> = order.iter().map(|&i| diags[i].clone()).collect();
            let layer = if conv {
                Layer::FactorizedConv2d(
                    FactorizedConv2d::new(u.clone(), d, v.clone(), None, ConvGeometry { stride: 1, padding: 1 })
                        .unwrap(),
                )
            } else {
                Layer::FactorizedLinear(FactorizedLinear::new(u.clone(), d, v.clone(), None).unwrap())
            };
            layer.contracted().unwrap().forward(&x, ForwardMode::Contracted).unwrap()
        };
        let reference = run(&[0, 1, 2]);
        let scale = reference.max_abs().max(f64::MIN_POSITIVE);
        for p in permutations(&[0, 1, 2]) {
            worst = worst.max(run(&p).max_abs_diff(&reference).unwrap() / scale);
            orders += 1;
        }
    }
    outcome(
        worst <= C3_REL_TOL,
        format!("20 layers × 6 orders ({orders} runs): worst rel deviation {worst:.2e} (tol {C3_REL_TOL:e})"),
    )
}

// ------------------------------------------------------------ criterion 4

fn c4_cost_identity() -> Outcome {
    let mut rng = seeded(404);
    let mut mismatches = Vec::new();
    for i in 0..C4_ARCHS {
        let (_, base, fac) = random_model_pair(i, DType::F32, &mut rng);
        let compact = contract_model(&fac).unwrap();
        let (pb, pc) = (count_params(&base).unwrap(), count_params(&compact).unwrap());
        let (fb, fc) = (
            count_flops(&base, &base.input_shape).unwrap(),
            count_flops(&compact, &compact.input_shape).unwrap(),
        );
        if pb.param_count != pc.param_count || fb.flops != fc.flops {
            mismatches.push(format!(
                "#{i}: params {} vs {}, flops {} vs {}",
                pb.param_count, pc.param_count, fb.flops, fc.flops
            ));
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{C4_ARCHS} architectures: contracted params and FLOPs equal the baseline's exactly")
        } else {
            mismatches.join("; ")
        },
    )
}

// ------------------------------------------------------------ criterion 5

fn c5_spectral() -> Outcome {
    let mut rng = seeded(505);
    let mut worst = 0.0f64;
    for case in 0..C5_CASES {
        let dtype = if case % 2 == 0 { DType::F64 } else { DType::F32 };
        let t = rng.random_range(1..=3);
        let extra = rng.random_range(0..=3);
        let seed = rng.random();
        let (w, contracted) = if case % 4 < 2 {
            let (m, n) = (rng.random_range(1..=24), rng.random_range(1..=24));
            let w = gaussian(&[m, n], dtype, &mut rng);
            let l = FactorizedLinear::from_dense(
                &w,
                None,
                m.min(n) + extra,
                t,
                FactorInit::Spectral,
                InitScheme::KaimingUniform,
                seed,
            )
            .unwrap();
            let c = l.contract().unwrap();
            (w, c)
        } else {
            let (co, ci, k) = (rng.random_range(1..=6), rng.random_range(1..=6), [1, 3][rng.random_range(0..2)]);
            let w = gaussian(&[co, ci, k, k], dtype, &mut rng);
            let l = FactorizedConv2d::from_dense(
                &w,
                None,
                ConvGeometry::default(),
                (co * k).min(ci * k) + extra,
                t,
                FactorInit::Spectral,
                InitScheme::KaimingUniform,
                seed,
            )
            .unwrap();
            let c = l.contract().unwrap();
            (w, c)
        };
        worst = worst.max(contracted.rel_frobenius_diff(&w).unwrap());
    }
    outcome(
        worst <= C5_REL_TOL,
        format!("{C5_CASES} cases (linear/conv, f32/f64, r ≥ min): worst rel reconstruction error {worst:.2e} (tol {C5_REL_TOL:e})"),
    )
}

// ------------------------------------------------------------ criterion 6

fn snapshot(model: &MtlModel) -> BTreeMap<String, Tensor> {
    model.params().into_iter().map(|(k, t)| (k.name(), t.clone())).collect()
}

fn toy_fac_model(tasks: usize, seed: u64) -> (MtlModel, opmt::Dataset) {
    let teacher = gen_linear_teacher(&TeacherConfig {
        n: 64,
        tasks,
        seed,
        ..TeacherConfig::default()
    })
    .unwrap();
    let spec = ModelSpec::Mlp {
        hidden: vec![6, 5],
        relu: true,
    };
    let heads = opmt::bench::teacher_tasks(tasks, 4);
    let base = spec
        .build_baseline(&[8], &heads, InitScheme::KaimingUniform, seed, DType::F64)
        .unwrap();
    let fac = factorize_model(&base, &spec.factorized_indices(&base), &FactorizeOptions::default()).unwrap();
    (fac, teacher.data)
}

fn c6_freeze() -> Outcome {
    let t = 3;
    let (mut model, data) = toy_fac_model(t, 6);
    let weights = vec![1.0 / t as f64; t];
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
    let (mut a_steps, mut b_steps) = (0, 0);
    let mut violations = Vec::new();
    for epoch in 0..C6_EPOCHS {
        let subset = subset_sample(data.len(), 0.25, 6, epoch).unwrap();
        for chunk in subset.chunks(8) {
            let batch = data.batch(chunk).unwrap();
            for j in 0..t {
                let before = snapshot(&model);
                phase_a_step(&mut model, &mut opt, &batch, j, 1e-2).unwrap();
                let after = snapshot(&model);
                let mut own_changed = false;
                for (name, old) in &before {
                    let same = old.bitwise_eq(&after[name]);
                    let own = name.starts_with("trunk.") && name.ends_with(&format!(".diag.{j}"));
                    own_changed |= own && !same;
                    if !own && !same {
                        violations.push(format!("epoch {epoch} phase A task {j} touched {name}"));
                    }
                }
                if !own_changed {
                    violations.push(format!("epoch {epoch} phase A task {j} left its diagonals unchanged"));
                }
                a_steps += 1;
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(6, epoch as u64)));
        for chunk in order.chunks(8) {
            let batch = data.batch(chunk).unwrap();
            let before = snapshot(&model);
            phase_b_step(&mut model, &mut opt, &batch, &weights, (1e-4, FrobeniusForm::Product), 1e-2).unwrap();
            let after = snapshot(&model);
            let mut shared_changed = false;
            for (name, old) in &before {
                let same = old.bitwise_eq(&after[name]);
                if name.contains(".diag.") && !same {
                    violations.push(format!("epoch {epoch} phase B touched {name}"));
                }
                shared_changed |= !name.contains(".diag.") && !same;
            }
            if !shared_changed {
                violations.push(format!("epoch {epoch} phase B changed nothing"));
            }
            b_steps += 1;
        }
    }
    let n = violations.len();
    outcome(
        n == 0,
        if n == 0 {
            format!("{C6_EPOCHS} epochs, {a_steps} phase-A and {b_steps} phase-B steps checked bitwise")
        } else {
            format!("{n} violations, first: {}", violations[0])
        },
    )
}

// ------------------------------------------------------------ criterion 7

fn c7_weight_decay() -> Outcome {
    let mut problems = Vec::new();
    for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
        let (mut model, _) = toy_fac_model(2, 7);
        let mut zero = Grads::new();
        for (key, t) in model.params() {
            zero.insert(key, t.zeros_like());
        }
        let mut opt = Optimizer::new(kind, C7_WEIGHT_DECAY);
        for step in 0..5 {
            let before = snapshot(&model);
            opt.step(&mut model, &zero, 1e-2).unwrap();
            let after = snapshot(&model);
            for (name, old) in &before {
                let new = &after[name];
                if name.contains(".diag.") {
                    if !old.bitwise_eq(new) {
                        problems.push(format!("{kind:?} step {step}: {name} changed"));
                    }
                } else if (name.ends_with(".u") || name.ends_with(".v"))
                    && new.frobenius_norm() >= old.frobenius_norm()
                {
                    problems.push(format!("{kind:?} step {step}: ‖{name}‖ did not shrink"));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("sgd-momentum and adam, weight_decay={C7_WEIGHT_DECAY}, 5 zero-gradient steps: diagonals bitwise fixed, every ‖u‖, ‖v‖ strictly decreasing")
        } else {
            problems.join("; ")
        },
    )
}

// ------------------------------------------------------------ criterion 8

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn max_dev_from_identity(q: &Tensor) -> f64 {
    let g = q.transpose().unwrap().matmul(q).unwrap();
    let k = g.shape()[0];
    g.sub(&Tensor::eye(k, DType::F64).unwrap()).unwrap().max_abs()
}

fn c8_svd() -> Outcome {
    let mut rng = seeded(808);
    let (mut orth, mut recon, mut sv) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..C8_CASES {
        let (m, n) = if case == 0 {
            (128, 96)
        } else if case == 1 {
            (96, 128)
        } else {
            (rng.random_range(1..=128), rng.random_range(1..=96))
        };
        let a = gaussian(&[m, n], DType::F64, &mut rng);
        let d = svd(&a).unwrap();
        orth = orth.max(max_dev_from_identity(&d.u)).max(max_dev_from_identity(&d.v));
        let rebuilt = d.u.scale_columns(&d.s).unwrap().matmul(&d.v.transpose().unwrap()).unwrap();
        recon = recon.max(rebuilt.rel_frobenius_diff(&a).unwrap());
        // Oracle: eigenvalues of the smaller Gram matrix.
        let gram = if m >= n {
            a.transpose().unwrap().matmul(&a).unwrap()
        } else {
            a.matmul(&a.transpose().unwrap()).unwrap()
        };
        let k = m.min(n);
        let oracle: Vec<f64> = jacobi_eigenvalues(gram.to_f64_vec(), k)
            .into_iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        let s = d.s.to_f64_vec();
        let smax = s[0].max(f64::MIN_POSITIVE);
        for (x, y) in s.iter().zip(&oracle) {
            sv = sv.max((x - y).abs() / smax);
        }
    }
    outcome(
        orth <= C8_TOL && recon <= C8_TOL && sv <= C8_TOL,
        format!(
            "{C8_CASES} matrices up to 128×96: orthogonality {orth:.2e}, reconstruction {recon:.2e}, singular values vs Jacobi eigen-oracle {sv:.2e} (rel to σ_max; tol {C8_TOL:e})"
        ),
    )
}

// ------------------------------------------------------------ criterion 9

fn c9_directional() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut fac = Vec::new();
    let mut base = Vec::new();
    for &seed in &C9_SEEDS {
        for mode in [Mode::Fac, Mode::Baseline] {
            let cfg = ExperimentConfig {
                train: TrainConfig {
                    mode,
                    seed,
                    epochs: C9_EPOCHS,
                    ..TrainConfig::default()
                },
                dataset: DatasetSpec::Shapes {
                    train: 500,
                    val: 100,
                    size: 64,
                    classes: 4,
                    seed,
                },
                model: ModelSpec::segnet_mini(),
                out_dir: root.path().join(format!("{}-{seed}", mode.as_str())),
            };
            let r = run_experiment(&cfg).unwrap();
            eprintln!(
                "  c9 {} seed {seed}: mIoU {:.4} pixacc {:.4} abs_err {:.4} ({:.0}s)",
                mode.as_str(),
                r.metrics.segmentation().unwrap().0,
                r.metrics.segmentation().unwrap().1,
                r.metrics.depth().unwrap().0,
                r.wall_s
            );
            if mode == Mode::Fac {
                fac.push(r);
            } else {
                base.push(r);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mean = |rs: &[ExperimentResult], f: &dyn Fn(&ExperimentResult) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    let miou = |r: &ExperimentResult| r.metrics.segmentation().unwrap().0;
    let (m_fac, m_base) = (mean(&fac, &miou), mean(&base, &miou));
    let pooled: Vec<_> = fac.iter().chain(&base).map(|r| r.metrics.clone()).collect();
    let scores = aggregate_scores(&pooled);
    let k = fac.len();
    let s_fac = scores[..k].iter().sum::<f64>() / k as f64;
    let s_base = scores[k..].iter().sum::<f64>() / k as f64;
    let miou_ok = m_fac >= m_base - C9_MIOU_SLACK;
    let score_ok = s_fac >= s_base;
    let time_ok = elapsed < C9_BUDGET_S;
    outcome(
        miou_ok && score_ok && time_ok,
        format!(
            "mean mIoU fac {m_fac:.4} vs baseline {m_base:.4} (need ≥ baseline − {C9_MIOU_SLACK}: {}); \
             mean aggregate z-score fac {s_fac:+.3} vs baseline {s_base:+.3} ({}); runtime {:.1} min (target < {} min: {})",
            ok(miou_ok),
            ok(score_ok),
            elapsed / 60.0,
            C9_BUDGET_S / 60.0,
            ok(time_ok)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISS"
    }
}

// ----------------------------------------------------------- criterion 10

fn c10_ablations() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut problems = Vec::new();
    for mode in Mode::ALL {
        let cfg = ExperimentConfig {
            train: TrainConfig {
                mode,
                epochs: 2,
                subset_fraction: 0.25,
                ..TrainConfig::default()
            },
            dataset: DatasetSpec::Shapes {
                train: 24,
                val: 8,
                size: 16,
                classes: 3,
                seed: 10,
            },
            model: ModelSpec::SegnetMini {
                widths: vec![4, 6, 6, 4],
            },
            out_dir: root.path().join(mode.as_str()),
        };
        match run_experiment(&cfg) {
            Ok(r) => results.push(r),
            Err(e) => problems.push(format!("{} failed: {e}", mode.as_str())),
        }
    }
    if let Some(b) = results.iter().find(|r| r.mode == Mode::Baseline) {
        for r in &results {
            if !r.equivalence_passed {
                problems.push(format!("{}: contraction check failed ({:.2e})", r.mode.as_str(), r.equivalence_max_abs));
            }
            if (r.inference_params, r.inference_flops) != (b.inference_params, b.inference_flops) {
                problems.push(format!("{}: inference cost differs from baseline", r.mode.as_str()));
            }
            if r.metrics.tasks.len() != b.metrics.tasks.len() {
                problems.push(format!("{}: metric table not comparable", r.mode.as_str()));
            }
        }
    }
    // Random-model contraction and cost checks per sharing scheme.
    let mut rng = seeded(1010);
    for &sharing in &SHARINGS[1..] {
        for i in 0..6 {
            let (spec, input, tasks) = random_arch(i % 2 == 0, &mut rng);
            let base = spec
                .build_baseline(&input, &tasks, InitScheme::KaimingUniform, i as u64, DType::F64)
                .unwrap();
            let opts = FactorizeOptions {
                sharing,
                extra_rank: 1,
                ..FactorizeOptions::default()
            };
            let mut fac = factorize_model(&base, &spec.factorized_indices(&base), &opts).unwrap();
            for (k, t) in fac.params_mut() {
                if k.site == Site::Trunk && k.role.is_diag() {
                    *t = t.hadamard(&uniform(t.shape(), 0.5, 1.5, DType::F64, &mut rng)).unwrap();
                }
            }
            let compact = contract_model(&fac).unwrap();
            let r = verify_equivalence(&fac, &compact, 4, C1_TOL_F64, 0, ForwardMode::Sequential).unwrap();
            if !r.passed {
                problems.push(format!("{sharing:?} model {i}: max-abs {:.2e}", r.max_abs));
            }
            if count_params(&compact).unwrap().param_count != count_params(&base).unwrap().param_count
                || count_flops(&compact, &input).unwrap().flops != count_flops(&base, &input).unwrap().flops
            {
                problems.push(format!("{sharing:?} model {i}: cost mismatch"));
            }
        }
    }
    // fac-no-iter with one task, no decay and spectral init starts exactly
    // where the baseline does.
    let cfg = |mode| ExperimentConfig {
        train: TrainConfig {
            mode,
            frobenius_decay: 0.0,
            init: FactorInit::Spectral,
            dtype: DType::F64,
            seed: 4,
            ..TrainConfig::default()
        },
        dataset: DatasetSpec::LinearTeacher {
            train: 64,
            val: 16,
            input_dim: 8,
            output_dim: 4,
            tasks: 1,
            rank: 3,
            noise: 0.1,
            identical: false,
            seed: 4,
        },
        model: ModelSpec::Mlp {
            hidden: vec![6, 6],
            relu: true,
        },
        out_dir: root.path().join("unused"),
    };
    let (cb, cf) = (cfg(Mode::Baseline), cfg(Mode::FacNoIter));
    let (train, _) = cb.dataset.build(DType::F64).unwrap();
    let mut mb = build_model(&cb, train.sample_shape()).unwrap();
    let mut mf = build_model(&cf, train.sample_shape()).unwrap();
    assert!(mf.factorized_layers() > 0 && mb.factorized_layers() == 0);
    let lb = evaluate_losses(&mb, &train, 8).unwrap()[0];
    let lf = evaluate_losses(&mf, &train, 8).unwrap()[0];
    let batch = train.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let sb = joint_step(&mut mb, &mut Optimizer::new(OptimizerKind::Adam, 0.0), &batch, &[1.0], (0.0, FrobeniusForm::Product), 1e-3)
        .unwrap()
        .task_losses[0];
    let sf = joint_step(&mut mf, &mut Optimizer::new(OptimizerKind::Adam, 0.0), &batch, &[1.0], (0.0, FrobeniusForm::Product), 1e-3)
        .unwrap()
        .task_losses[0];
    let dl = (lb - lf).abs().max((sb - sf).abs());
    if dl > C10_LOSS_TOL {
        problems.push(format!("fac-no-iter initial loss differs from baseline by {dl:.2e}"));
    }
    let table = results_table(&results);
    for line in table.lines() {
        eprintln!("  c10 | {line}");
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "all {} modes ran end to end with passing contraction and equal inference cost; fac-no-iter vs baseline initial loss Δ {dl:.2e} (tol {C10_LOSS_TOL:e})",
                results.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

// ----------------------------------------------------------- criterion 11

fn c11_archive() -> Outcome {
    let mut rng = seeded(1111);
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for i in 0..C11_MODELS {
        let dtype = if i % 3 == 0 { DType::F64 } else { DType::F32 };
        let (_, base, fac) = random_model_pair(i, dtype, &mut rng);
        let model = if i % 4 == 3 { base } else { fac };
        let path = dir.path().join(format!("m{i}.opmt"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let bitwise = model.same_topology(&loaded)
            && model.params().len() == loaded.params().len()
            && model
                .params()
                .iter()
                .zip(loaded.params())
                .all(|((ka, a), (kb, b))| ka == &kb && a.bitwise_eq(b));
        if !bitwise || loaded != model {
            problems.push(format!("model {i}: reload differs"));
        }
        let bytes = std::fs::read(&path).unwrap();
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != trailer {
            problems.push(format!("model {i}: CRC trailer mismatch"));
        }
        if TensorArchive::from_bytes(&bytes).unwrap().to_bytes().unwrap() != bytes {
            problems.push(format!("model {i}: re-encoding differs"));
        }
        let mut corrupt = bytes.clone();
        let at = rng.random_range(12..corrupt.len() - 4);
        corrupt[at] ^= 0x10;
        if TensorArchive::from_bytes(&corrupt).is_ok() {
            problems.push(format!("model {i}: corrupted byte {at} not detected"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{C11_MODELS} random models: bitwise reload, CRC trailer verified, single-byte corruption rejected")
        } else {
            problems.join("; ")
        },
    )
}

// ------------------------------------------------------------------ main

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(u32, &str, Check); 11] = [
        (1, "contraction equivalence", c1_contraction),
        (2, "gradient correctness", c2_gradients),
        (3, "diagonal order invariance", c3_order_invariance),
        (4, "inference-cost identity", c4_cost_identity),
        (5, "spectral init reconstruction", c5_spectral),
        (6, "freeze discipline", c6_freeze),
        (7, "weight-decay exclusion", c7_weight_decay),
        (8, "svd quality", c8_svd),
        (9, "directional multitask benefit", c9_directional),
        (10, "ablation machinery", c10_ablations),
        (11, "archive round trip", c11_archive),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {n:>2} {:<30} {} — {} [{:.1}s]",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
