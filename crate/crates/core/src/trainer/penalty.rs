//! Frobenius decay on factorized layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FactorGrads, Grads, Layer, MtlModel, ParamGrads, ParamKey, ParamRole};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrobeniusForm {
    /// `(λ/2)·‖U·diag(M)·V‖²` on the contracted weight.
    #[default]
    Product,
    /// `(λ/2)·(‖U‖² + ‖V‖² + Σ‖M⁽ⁱ⁾‖²)` on each stored factor.
    PerFactor,
}

impl FrobeniusForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "per-factor" => Ok(Self::PerFactor),
            other => Err(Error::Argument(format!(
                "unknown frobenius form `{other}` (expected product or per-factor)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Product => "product",
            Self::PerFactor => "per-factor",
        }
    }
}

fn pack(fg: FactorGrads) -> ParamGrads {
    let mut out = vec![(ParamRole::U, fg.du), (ParamRole::V, fg.dv)];
    out.extend(fg.d_task_diags.into_iter().enumerate().map(|(i, d)| (ParamRole::Diag(i), d)));
    out
}

/// Penalty value and its gradients for one layer; `None` for layers that
/// are not factorized.
pub fn layer_penalty(layer: &Layer, lambda: f64, form: FrobeniusForm) -> Result<Option<(f64, ParamGrads)>> {
    let (u, diags, v) = match layer {
        Layer::FactorizedLinear(l) => (&l.u, &l.task_diags, &l.v),
        Layer::FactorizedConv2d(l) => (&l.u, &l.task_diags, &l.v),
        _ => return Ok(None),
    };
    let zero_grads = || -> ParamGrads {
        let mut out = vec![(ParamRole::U, u.zeros_like()), (ParamRole::V, v.zeros_like())];
        out.extend(diags.iter().enumerate().map(|(i, d)| (ParamRole::Diag(i), d.zeros_like())));
        out
    };
    if lambda == 0.0 {
        return Ok(Some((0.0, zero_grads())));
    }
    match form {
        FrobeniusForm::Product => {
            let (w, fg) = match layer {
                Layer::FactorizedLinear(l) => {
                    let w = l.contract()?;
                    let fg = l.weight_grad_to_factors(&w.scale(lambda))?;
                    (w, fg)
                }
                Layer::FactorizedConv2d(l) => {
                    let w = l.contract()?;
                    let fg = l.weight_grad_to_factors(&w.scale(lambda))?;
                    (w, fg)
                }
                _ => unreachable!("checked above"),
            };
            Ok(Some((0.5 * lambda * w.sum_squares(), pack(fg))))
        }
        FrobeniusForm::PerFactor => {
            let sq = u.sum_squares() + v.sum_squares() + diags.iter().map(Tensor::sum_squares).sum::<f64>();
            let fg = FactorGrads {
                du: u.scale(lambda),
                dv: v.scale(lambda),
                d_task_diags: diags.iter().map(|d| d.scale(lambda)).collect(),
            };
            Ok(Some((0.5 * lambda * sq, pack(fg))))
        }
    }
}

/// Sum of the penalties of every factorized trunk layer, with gradients.
pub fn frobenius_penalty(model: &MtlModel, lambda: f64, form: FrobeniusForm) -> Result<(f64, Grads)> {
    if lambda < 0.0 {
        return Err(Error::Argument(format!("frobenius decay must be ≥ 0, got {lambda}")));
    }
    let mut total = 0.0;
    let mut grads = Grads::new();
    for (i, layer) in model.trunk.iter().enumerate() {
        if let Some((value, g)) = layer_penalty(layer, lambda, form)? {
            total += value;
            for (role, t) in g {
                grads.insert(ParamKey::trunk(i, role), t);
            }
        }
    }
    Ok((total, grads))
}
