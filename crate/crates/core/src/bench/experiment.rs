//! Config-driven experiment runs: build, train, export, verify, evaluate.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::metrics::{evaluate, MetricReport};
use super::shapes::{gen_shapes_split, shapes_tasks};
use super::teacher::{gen_linear_teacher, teacher_tasks, TeacherConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::arch::{factorize_model, FactorizeOptions, ModelSpec};
use crate::layers::{ForwardMode, MtlModel, Sharing, TaskHead};
use crate::model_io::{contract_model, count_flops, save_model, verify_equivalence, EquivalenceReport};
use crate::rng::derive_seed;
use crate::tensor::DType;
use crate::trainer::{fit, Mode, TrainConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.opmt";
pub const COMPACT_FILE: &str = "compact.opmt";
pub const EQUIVALENCE_FILE: &str = "equivalence.json";
pub const RESULTS_FILE: &str = "results.json";

/// Inputs compared by the post-training equivalence check.
const VERIFY_SAMPLES: usize = 16;
const MODEL_STREAM: u64 = 11;
const VERIFY_STREAM: u64 = 12;

/// Equivalence tolerance for a dtype.
pub fn default_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

/// Which synthetic dataset to generate.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Shapes {
        train: usize,
        val: usize,
        size: usize,
        classes: usize,
        seed: u64,
    },
    LinearTeacher {
        train: usize,
        val: usize,
        input_dim: usize,
        output_dim: usize,
        tasks: usize,
        rank: usize,
        noise: f64,
        identical: bool,
        seed: u64,
    },
}

fn field<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("dataset option `{k}` has an invalid value `{v}`")))
}

impl DatasetSpec {
    pub fn shapes_default() -> Self {
        DatasetSpec::Shapes {
            train: 500,
            val: 100,
            size: 64,
            classes: 4,
            seed: 0,
        }
    }

    pub fn teacher_default() -> Self {
        DatasetSpec::LinearTeacher {
            train: 256,
            val: 64,
            input_dim: 8,
            output_dim: 4,
            tasks: 2,
            rank: 3,
            noise: 0.0,
            identical: false,
            seed: 0,
        }
    }

    /// Parses `shapes train=500 val=100 size=64 classes=4 seed=0` or
    /// `linear-teacher train=256 val=64 input_dim=8 output_dim=4 tasks=2
    /// rank=3 noise=0 identical=false seed=0`; omitted options keep their
    /// defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let mut spec = match words.next() {
            Some("shapes") => Self::shapes_default(),
            Some("linear-teacher") => Self::teacher_default(),
            Some(other) => return Err(Error::Argument(format!("unknown dataset `{other}`"))),
            None => return Err(Error::Argument("empty dataset spec".into())),
        };
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("expected key=value in dataset spec, got `{w}`")))?;
            match &mut spec {
                DatasetSpec::Shapes { train, val, size, classes, seed } => match k {
                    "train" => *train = field(k, v)?,
                    "val" => *val = field(k, v)?,
                    "size" => *size = field(k, v)?,
                    "classes" => *classes = field(k, v)?,
                    "seed" => *seed = field(k, v)?,
                    _ => return Err(Error::Argument(format!("unknown shapes option `{k}`"))),
                },
                DatasetSpec::LinearTeacher {
                    train,
                    val,
                    input_dim,
                    output_dim,
                    tasks,
                    rank,
                    noise,
                    identical,
                    seed,
                } => match k {
                    "train" => *train = field(k, v)?,
                    "val" => *val = field(k, v)?,
                    "input_dim" => *input_dim = field(k, v)?,
                    "output_dim" => *output_dim = field(k, v)?,
                    "tasks" => *tasks = field(k, v)?,
                    "rank" => *rank = field(k, v)?,
                    "noise" => *noise = field(k, v)?,
                    "identical" => *identical = field(k, v)?,
                    "seed" => *seed = field(k, v)?,
                    _ => return Err(Error::Argument(format!("unknown linear-teacher option `{k}`"))),
                },
            }
        }
        Ok(spec)
    }

    pub fn tasks(&self) -> Vec<TaskHead> {
        match *self {
            DatasetSpec::Shapes { classes, .. } => shapes_tasks(classes),
            DatasetSpec::LinearTeacher { tasks, output_dim, .. } => teacher_tasks(tasks, output_dim),
        }
    }

    /// Generates `(train, val)`.
    pub fn build(&self, dtype: DType) -> Result<(Dataset, Dataset)> {
        match *self {
            DatasetSpec::Shapes { train, val, size, classes, seed } => {
                gen_shapes_split(train, val, size, classes, seed, dtype)
            }
            DatasetSpec::LinearTeacher {
                train,
                val,
                input_dim,
                output_dim,
                tasks,
                rank,
                noise,
                identical,
                seed,
            } => {
                let all = gen_linear_teacher(&TeacherConfig {
                    n: train + val,
                    input_dim,
                    output_dim,
                    tasks,
                    rank,
                    noise,
                    identical,
                    seed,
                    dtype,
                })?
                .data;
                if train == 0 || val == 0 {
                    return Err(Error::Argument("train and val sizes must be positive".into()));
                }
                let tr: Vec<usize> = (0..train).collect();
                let va: Vec<usize> = (train..train + val).collect();
                Ok((all.batch(&tr)?, all.batch(&va)?))
            }
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Shapes { train, val, size, classes, seed } => {
                write!(f, "shapes train={train} val={val} size={size} classes={classes} seed={seed}")
            }
            DatasetSpec::LinearTeacher {
                train,
                val,
                input_dim,
                output_dim,
                tasks,
                rank,
                noise,
                identical,
                seed,
            } => write!(
                f,
                "linear-teacher train={train} val={val} input_dim={input_dim} output_dim={output_dim} \
                 tasks={tasks} rank={rank} noise={noise} identical={identical} seed={seed}"
            ),
        }
    }
}

/// A parsed experiment config file.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: DatasetSpec::shapes_default(),
            model: ModelSpec::segnet_mini(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Sets one key; the error carries no line number.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = DatasetSpec::parse(value)?,
            "model" => self.model = ModelSpec::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::Argument(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| Error::Config {
                line,
                key: key.to_string(),
                msg,
            };
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(content, "expected `key = value`".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(key, "key given twice".into()));
            }
            cfg.set(key, value).map_err(|e| {
                let msg = match e {
                    Error::Argument(m) => m,
                    other => other.to_string(),
                };
                err(key, msg)
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("dataset", self.dataset.to_string());
        put("model", self.model.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("lr_phase_a", opt(t.lr_phase_a.map(|x| x.to_string())));
        put("optimizer", t.optimizer.as_str().into());
        put("weight_decay", t.weight_decay.to_string());
        put("frobenius_decay", t.frobenius_decay.to_string());
        put("frobenius_form", t.frobenius_form.as_str().into());
        put("subset_fraction", t.subset_fraction.to_string());
        put("loss_weights", t.loss_weights.to_string());
        put("mode", t.mode.as_str().into());
        put("init", t.init.as_str().into());
        put("init_scheme", t.init_scheme.as_str().into());
        put("rank_extra", t.rank_extra.to_string());
        put("seed", t.seed.to_string());
        put("lr_halve_epoch", opt(t.lr_halve_epoch.map(|x| x.to_string())));
        put("alternation", t.alternation.as_str().into());
        put("patience", opt(t.patience.map(|x| x.to_string())));
        put("dtype", t.dtype.name().into());
        s
    }
}

/// Builds the model a config describes: the baseline network, factorized
/// unless the mode is `baseline`.
pub fn build_model(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<MtlModel> {
    let t = &cfg.train;
    let tasks = cfg.dataset.tasks();
    let seed = derive_seed(t.seed, MODEL_STREAM);
    let base = cfg.model.build_baseline(input_shape, &tasks, t.init_scheme, seed, t.dtype)?;
    let Some(sharing) = t.mode.sharing() else {
        return Ok(base);
    };
    let indices = cfg.model.factorized_indices(&base);
    factorize_model(
        &base,
        &indices,
        &FactorizeOptions {
            init: t.init,
            sharing,
            extra_rank: t.rank_extra,
            scheme: t.init_scheme,
            seed,
        },
    )
}

/// Outcome of one run, also written to `results.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResult {
    pub mode: Mode,
    pub seed: u64,
    pub dataset: String,
    pub model: String,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_train_losses: Vec<f64>,
    pub final_val_losses: Option<Vec<f64>>,
    pub metrics: MetricReport,
    pub trained_params: usize,
    pub inference_params: usize,
    pub inference_flops: u64,
    pub equivalence_passed: bool,
    pub equivalence_max_abs: f64,
    pub wall_s: f64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("results are plain data");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs one experiment end to end. Writes the metrics stream, the trained
/// and contracted archives, the equivalence report and `results.json`
/// into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let t = &cfg.train;
    let (train, val) = cfg.dataset.build(t.dtype)?;
    let mut model = build_model(cfg, train.sample_shape())?;
    let trained_params = model.param_count();

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = BufWriter::new(file);
    let summary = fit(&mut model, &train, Some(&val), t, |r| {
        writeln!(sink, "{}", r.to_json_line())
            .and_then(|_| sink.flush())
            .map_err(|e| Error::io(&metrics_path, e))
    })?;
    drop(sink);

    save_model(&model, dir.join(MODEL_FILE))?;
    let compact = contract_model(&model)?;
    save_model(&compact, dir.join(COMPACT_FILE))?;
    let equivalence: EquivalenceReport = verify_equivalence(
        &model,
        &compact,
        VERIFY_SAMPLES,
        default_tolerance(t.dtype),
        derive_seed(t.seed, VERIFY_STREAM),
        ForwardMode::Contracted,
    )?;
    write_json(&dir.join(EQUIVALENCE_FILE), &equivalence)?;

    let metrics = evaluate(&compact, &val)?;
    let cost = count_flops(&compact, train.sample_shape())?;
    let last = summary.reports.last();
    let result = ExperimentResult {
        mode: t.mode,
        seed: t.seed,
        dataset: cfg.dataset.to_string(),
        model: cfg.model.to_string(),
        epochs_run: summary.reports.len(),
        stopped_early: summary.stopped_early,
        final_train_losses: last.map(|r| r.task_losses.clone()).unwrap_or_default(),
        final_val_losses: last.and_then(|r| r.val_losses.clone()),
        metrics,
        trained_params,
        inference_params: cost.param_count,
        inference_flops: cost.flops,
        equivalence_passed: equivalence.passed,
        equivalence_max_abs: equivalence.max_abs,
        wall_s: start.elapsed().as_secs_f64(),
        out_dir: dir.clone(),
    };
    write_json(&dir.join(RESULTS_FILE), &result)?;
    Ok(result)
}

fn sharing_label(s: Option<Sharing>) -> &'static str {
    match s {
        None => "-",
        Some(Sharing::TaskDiagonals) => "diag",
        Some(Sharing::UvBlocks) => "uv",
        Some(Sharing::MBlocks) => "m",
    }
}

/// Plain-text comparison table, one row per run.
pub fn results_table(results: &[ExperimentResult]) -> String {
    let mut out = format!(
        "{:<12} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>12} {:>6}\n",
        "mode", "seed", "share", "mIoU", "pixacc", "abs_err", "angle", "mse", "params", "flops", "equiv"
    );
    let num = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for r in results {
        let mse = r.metrics.tasks.iter().find_map(|t| match *t {
            super::metrics::TaskMetrics::Regression { mse } => Some(mse),
            _ => None,
        });
        out.push_str(&format!(
            "{:<12} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>12} {:>6}\n",
            r.mode.as_str(),
            r.seed,
            sharing_label(r.mode.sharing()),
            num(r.metrics.segmentation().map(|s| s.0)),
            num(r.metrics.segmentation().map(|s| s.1)),
            num(r.metrics.depth().map(|d| d.0)),
            num(r.metrics.mean_angle()),
            num(mse),
            r.inference_params,
            r.inference_flops,
            if r.equivalence_passed { "ok" } else { "FAIL" },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let text = "\
# toy run
dataset = linear-teacher train=32 val=8 tasks=3
model = mlp hidden=6
mode = uvshare   # trailing comment
epochs = 2
lr_halve_epoch = 1
out_dir = /tmp/x
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.mode, Mode::UvShare);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.dataset.tasks().len(), 3);
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.dataset, cfg.dataset);
        assert_eq!(again.model, cfg.model);
        assert_eq!(again.out_dir, cfg.out_dir);
    }

    #[test]
    fn config_errors_carry_line_and_key() {
        let e = ExperimentConfig::parse("epochs = 3\n\nlearning_rate = 0.1\n").unwrap_err();
        match e {
            Error::Config { line, key, .. } => assert_eq!((line, key.as_str()), (3, "learning_rate")),
            other => panic!("unexpected {other:?}"),
        }
        let e = ExperimentConfig::parse("epochs = three").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
    }

    #[test]
    fn dataset_spec_parse() {
        let s = DatasetSpec::parse("shapes train=10 size=32").unwrap();
        assert_eq!(DatasetSpec::parse(&s.to_string()).unwrap(), s);
        assert!(DatasetSpec::parse("shapes depth=3").is_err());
        assert!(DatasetSpec::parse("mnist").is_err());
    }
}
