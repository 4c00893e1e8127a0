use std::fmt;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use super::penalty::FrobeniusForm;
use crate::error::{Error, Result};
use crate::layers::{FactorInit, Sharing};
use crate::linalg::InitScheme;
use crate::tensor::DType;

/// Training variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Alternating: per-task diagonals on a subset, then shared parameters.
    #[default]
    Fac,
    /// Factorized, every parameter trained jointly on the combined loss.
    FacNoIter,
    /// Joint training; `U` columns / `V` rows split into per-task blocks.
    #[serde(rename = "uvshare")]
    UvShare,
    /// Joint training; the single diagonal split into per-task blocks.
    #[serde(rename = "mshare")]
    MShare,
    /// Plain, unfactorized model.
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::Fac, Mode::FacNoIter, Mode::UvShare, Mode::MShare];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown mode `{s}` (expected baseline, fac, fac-no-iter, uvshare or mshare)"
                ))
            })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fac => "fac",
            Mode::FacNoIter => "fac-no-iter",
            Mode::UvShare => "uvshare",
            Mode::MShare => "mshare",
            Mode::Baseline => "baseline",
        }
    }

    /// Factor sharing the model must use; `None` for the plain baseline.
    pub fn sharing(self) -> Option<Sharing> {
        match self {
            Mode::Fac | Mode::FacNoIter => Some(Sharing::TaskDiagonals),
            Mode::UvShare => Some(Sharing::UvBlocks),
            Mode::MShare => Some(Sharing::MBlocks),
            Mode::Baseline => None,
        }
    }
}

/// When phase A runs relative to phase B in `fac` mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// Phase A over a fresh subset, then phase B over the full set, each
    /// epoch.
    #[default]
    PerEpoch,
    /// Phase A then phase B on every mini-batch of the full set.
    PerBatch,
}

impl Alternation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-epoch" => Ok(Self::PerEpoch),
            "per-batch" => Ok(Self::PerBatch),
            other => Err(Error::Argument(format!(
                "unknown alternation `{other}` (expected per-epoch or per-batch)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerEpoch => "per-epoch",
            Self::PerBatch => "per-batch",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeights {
    /// `1/t` for every task.
    #[default]
    Equal,
    Fixed(Vec<f64>),
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Equal => f.write_str("equal"),
            Self::Fixed(w) => {
                let parts: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl LossWeights {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "equal" {
            return Ok(Self::Equal);
        }
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("loss weight `{x}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::Fixed)
    }

    pub fn resolve(&self, tasks: usize) -> Result<Vec<f64>> {
        match self {
            Self::Equal => Ok(vec![1.0 / tasks as f64; tasks]),
            Self::Fixed(w) => {
                if w.len() != tasks {
                    return Err(Error::Argument(format!("{} loss weights for {tasks} tasks", w.len())));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Every knob of a training run. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of phase B and of the single-phase modes.
    pub lr: f64,
    /// Learning rate of phase A; defaults to `lr`.
    pub lr_phase_a: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Coupled L2 decay; never applied to task diagonals.
    pub weight_decay: f64,
    pub frobenius_decay: f64,
    pub frobenius_form: FrobeniusForm,
    pub subset_fraction: f64,
    pub loss_weights: LossWeights,
    pub mode: Mode,
    pub init: FactorInit,
    pub init_scheme: InitScheme,
    /// Rank added on top of the full-rank minimum of each factorized layer.
    pub rank_extra: usize,
    pub seed: u64,
    /// From this epoch on the learning rates are halved.
    pub lr_halve_epoch: Option<usize>,
    pub alternation: Alternation,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            lr_phase_a: None,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            frobenius_decay: 1e-4,
            frobenius_form: FrobeniusForm::Product,
            subset_fraction: 0.03,
            loss_weights: LossWeights::Equal,
            mode: Mode::Fac,
            init: FactorInit::Spectral,
            init_scheme: InitScheme::KaimingUniform,
            rank_extra: 0,
            seed: 0,
            lr_halve_epoch: None,
            alternation: Alternation::PerEpoch,
            patience: None,
            dtype: DType::F32,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Argument(format!("`{key}` has an invalid value `{value}`")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "epochs",
        "batch_size",
        "lr",
        "lr_phase_a",
        "optimizer",
        "weight_decay",
        "frobenius_decay",
        "frobenius_form",
        "subset_fraction",
        "loss_weights",
        "mode",
        "init",
        "init_scheme",
        "rank_extra",
        "seed",
        "lr_halve_epoch",
        "alternation",
        "patience",
        "dtype",
    ];

    /// Sets a field from its textual form. `Ok(false)` means the key is not a
    /// training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_phase_a" => self.lr_phase_a = optional(key, value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "frobenius_decay" => self.frobenius_decay = num(key, value)?,
            "frobenius_form" => self.frobenius_form = FrobeniusForm::parse(value)?,
            "subset_fraction" => self.subset_fraction = num(key, value)?,
            "loss_weights" => self.loss_weights = LossWeights::parse(value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "init" => self.init = FactorInit::parse(value)?,
            "init_scheme" => self.init_scheme = InitScheme::parse(value)?,
            "rank_extra" => self.rank_extra = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr_halve_epoch" => self.lr_halve_epoch = optional(key, value)?,
            "alternation" => self.alternation = Alternation::parse(value)?,
            "patience" => self.patience = optional(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "float32" | "f32" => DType::F32,
                    "float64" | "f64" => DType::F64,
                    other => return Err(Error::Argument(format!("unknown dtype `{other}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn lr_phase_a(&self) -> f64 {
        self.lr_phase_a.unwrap_or(self.lr)
    }

    /// Learning-rate multiplier for `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        match self.lr_halve_epoch {
            Some(h) if epoch >= h => 0.5,
            _ => 1.0,
        }
    }

    /// Checks the configuration against a task count and training-set size.
    pub fn validate(&self, tasks: usize, train_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_phase_a", self.lr_phase_a()),
            ("weight_decay", self.weight_decay),
            ("frobenius_decay", self.frobenius_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction must lie in (0, 1], got {}", self.subset_fraction));
        }
        if self.mode == Mode::Fac && self.subset_fraction * train_len as f64 + 1e-9 < 1.0 {
            return bad(format!(
                "subset_fraction {} selects no sample out of {train_len}",
                self.subset_fraction
            ));
        }
        let w = self.loss_weights.resolve(tasks)?;
        if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return bad(format!("loss weights must be > 0, got {x}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            "3", "4", "0.1", "0.2", "sgd-momentum", "0.01", "0", "per-factor", "0.5", "1,2", "mshare",
            "identity-diag", "glorot-uniform", "2", "7", "5", "per-batch", "3", "float64",
        ];
        let mut cfg = TrainConfig::default();
        for (k, v) in TrainConfig::KEYS.iter().zip(samples) {
            assert!(cfg.set(k, v).unwrap(), "{k}");
        }
        assert_eq!(cfg.mode, Mode::MShare);
        assert_eq!(cfg.loss_weights, LossWeights::Fixed(vec![1.0, 2.0]));
        assert_eq!(cfg.dtype, DType::F64);
        assert!(!cfg.set("dataset", "shapes").unwrap());
        assert!(cfg.set("epochs", "many").is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.as_str()).unwrap(), m);
        }
        assert!(Mode::parse("fac-iter").is_err());
    }

    #[test]
    fn validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(3, 500).is_ok());
        assert!(cfg.validate(3, 10).is_err());
        let mut c = cfg.clone();
        c.loss_weights = LossWeights::Fixed(vec![1.0, 0.0, 1.0]);
        assert!(c.validate(3, 500).is_err());
        c.loss_weights = LossWeights::Fixed(vec![1.0, 1.0]);
        assert!(c.validate(3, 500).is_err());
        assert_eq!(LossWeights::Equal.resolve(4).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn halving() {
        let cfg = TrainConfig {
            lr_halve_epoch: Some(2),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_scale(1), 1.0);
        assert_eq!(cfg.lr_scale(2), 0.5);
    }
}
