use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Cache, ForwardMode, Layer, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Loss attached to a task head; also decides which metrics apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy over the channel axis (segmentation).
    CrossEntropy,
    /// Mean absolute error (depth).
    L1,
    /// `1 - cos` between predicted and target vectors along channels
    /// (surface normals).
    Cosine,
    /// Mean squared error (vector regression).
    Mse,
}

impl LossKind {
    pub fn code(self) -> u8 {
        match self {
            LossKind::CrossEntropy => 0,
            LossKind::L1 => 1,
            LossKind::Cosine => 2,
            LossKind::Mse => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => LossKind::CrossEntropy,
            1 => LossKind::L1,
            2 => LossKind::Cosine,
            3 => LossKind::Mse,
            other => return Err(Error::Format(format!("unknown loss code {other}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "softmax-cross-entropy",
            LossKind::L1 => "l1",
            LossKind::Cosine => "cosine",
            LossKind::Mse => "mse",
        }
    }
}

/// A task: its loss and the number of output channels its head produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHead {
    pub loss: LossKind,
    pub channels: usize,
}

/// How factorized trunk layers share their factors between tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// One diagonal per task, multiplied together.
    #[default]
    TaskDiagonals,
    /// Single diagonal; columns of `U` / rows of `V` split into per-task
    /// blocks.
    UvBlocks,
    /// Single diagonal split into per-task blocks.
    MBlocks,
}

impl Sharing {
    pub fn code(self) -> u8 {
        match self {
            Sharing::TaskDiagonals => 0,
            Sharing::UvBlocks => 1,
            Sharing::MBlocks => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Sharing::TaskDiagonals,
            1 => Sharing::UvBlocks,
            2 => Sharing::MBlocks,
            other => return Err(Error::Format(format!("unknown sharing code {other}"))),
        })
    }

    /// Diagonals each factorized layer carries under this scheme.
    pub fn diag_count(self, tasks: usize) -> usize {
        match self {
            Sharing::TaskDiagonals => tasks,
            Sharing::UvBlocks | Sharing::MBlocks => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Trunk,
    Head(usize),
}

/// Identifies one parameter tensor of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub site: Site,
    pub layer: usize,
    pub role: ParamRole,
}

impl ParamKey {
    pub fn trunk(layer: usize, role: ParamRole) -> Self {
        Self {
            site: Site::Trunk,
            layer,
            role,
        }
    }

    pub fn head(task: usize, layer: usize, role: ParamRole) -> Self {
        Self {
            site: Site::Head(task),
            layer,
            role,
        }
    }

    /// Archive name: `trunk.<layer>.<role>` or `head.<task>.<layer>.<role>`,
    /// with diagonals as `<...>.diag.<task>`.
    pub fn name(&self) -> String {
        match self.site {
            Site::Trunk => format!("trunk.{}.{}", self.layer, self.role.suffix()),
            Site::Head(t) => format!("head.{t}.{}.{}", self.layer, self.role.suffix()),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unrecognised parameter name `{name}`"));
        let parts: Vec<&str> = name.split('.').collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let (site, rest) = match parts.as_slice() {
            ["trunk", rest @ ..] => (Site::Trunk, rest),
            ["head", t, rest @ ..] => (Site::Head(num(t)?), rest),
            _ => return Err(bad()),
        };
        let (layer, role) = match rest {
            [l, "weight"] => (num(l)?, ParamRole::Weight),
            [l, "bias"] => (num(l)?, ParamRole::Bias),
            [l, "u"] => (num(l)?, ParamRole::U),
            [l, "v"] => (num(l)?, ParamRole::V),
            [l, "diag", t] => (num(l)?, ParamRole::Diag(num(t)?)),
            _ => return Err(bad()),
        };
        Ok(Self { site, layer, role })
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parameter gradients keyed by [`ParamKey`], iterated in key order.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: BTreeMap<ParamKey, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.map.insert(key, grad);
    }

    pub fn remove(&mut self, key: &ParamKey) -> Option<Tensor> {
        self.map.remove(key)
    }

    /// Adds `alpha * grad` into the entry for `key`.
    pub fn accumulate(&mut self, key: ParamKey, alpha: f64, grad: &Tensor) -> Result<()> {
        match self.map.get_mut(&key) {
            Some(existing) => existing.axpy(alpha, grad),
            None => {
                let g = if alpha == 1.0 { grad.clone() } else { grad.scale(alpha) };
                self.map.insert(key, g);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: &Grads, alpha: f64) -> Result<()> {
        for (k, g) in &other.map {
            self.accumulate(*k, alpha, g)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&ParamKey) -> bool) {
        self.map.retain(|k, _| keep(k));
    }
}

/// Per-layer caches from a forward pass through a stack of layers.
pub struct StackPass {
    pub output: Tensor,
    pub caches: Vec<Cache>,
}

/// Hard-parameter-sharing model: a shared trunk followed by one head per
/// task.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    pub trunk: Vec<Layer>,
    pub heads: Vec<Vec<Layer>>,
    pub tasks: Vec<TaskHead>,
    /// Shape of one input sample (no batch axis).
    pub input_shape: Vec<usize>,
    pub sharing: Sharing,
}

fn run_stack(layers: &[Layer], x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(&h, mode)?;
    }
    Ok(h)
}

fn train_stack(layers: &[Layer], x: &Tensor) -> Result<StackPass> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for layer in layers {
        let (y, cache) = layer.forward_train(&h)?;
        caches.push(cache);
        h = y;
    }
    Ok(StackPass { output: h, caches })
}

/// Backpropagates through `layers`; returns the input gradient if
/// `need_dx`.
fn backward_stack(
    layers: &[Layer],
    caches: &[Cache],
    dy: &Tensor,
    need_dx: bool,
    key: impl Fn(usize, ParamRole) -> ParamKey,
    grads: &mut Grads,
) -> Result<Option<Tensor>> {
    if layers.len() != caches.len() {
        return Err(Error::Structural("cache count does not match layer count".into()));
    }
    let mut g = dy.clone();
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want_dx = need_dx || i > 0;
        let (dx, params) = layer.backward(cache, &g, want_dx)?;
        for (role, t) in params {
            grads.insert(key(i, role), t);
        }
        match dx {
            Some(dx) => g = dx,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}

impl MtlModel {
    pub fn new(
        trunk: Vec<Layer>,
        heads: Vec<Vec<Layer>>,
        tasks: Vec<TaskHead>,
        input_shape: Vec<usize>,
        sharing: Sharing,
    ) -> Result<Self> {
        let model = Self {
            trunk,
            heads,
            tasks,
            input_shape,
            sharing,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tasks.len();
        if t == 0 {
            return Err(Error::Structural("a model needs at least one task".into()));
        }
        if self.heads.len() != t {
            return Err(Error::Structural(format!("{} heads for {t} tasks", self.heads.len())));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Structural(format!("invalid input shape {:?}", self.input_shape)));
        }
        let want = self.sharing.diag_count(t);
        for (i, layer) in self.trunk.iter().enumerate() {
            if let Some(d) = layer.task_diag_count() {
                if d != want {
                    return Err(Error::Structural(format!(
                        "trunk layer {i} has {d} task diagonals, expected {want}"
                    )));
                }
            }
        }
        for (j, head) in self.heads.iter().enumerate() {
            if head.iter().any(Layer::is_factorized) {
                return Err(Error::Structural(format!("head {j} contains a factorized layer")));
            }
        }
        let dtypes: Vec<DType> = self.params().iter().map(|(_, p)| p.dtype()).collect();
        if dtypes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Structural("parameters have mixed dtypes".into()));
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn dtype(&self) -> DType {
        self.params().first().map_or(DType::F32, |(_, p)| p.dtype())
    }

    pub fn factorized_layers(&self) -> usize {
        self.trunk.iter().filter(|l| l.is_factorized()).count()
    }

    /// Batched input shape for `batch` samples.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.input_shape);
        s
    }

    pub fn forward_trunk(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        run_stack(&self.trunk, x, mode)
    }

    pub fn forward_head(&self, task: usize, features: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let head = self.head(task)?;
        run_stack(head, features, mode)
    }

    /// Per-task outputs for a batch.
    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Vec<Tensor>> {
        let features = self.forward_trunk(x, mode)?;
        (0..self.task_count())
            .map(|j| self.forward_head(j, &features, mode))
            .collect()
    }

    fn head(&self, task: usize) -> Result<&[Layer]> {
        self.heads
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Argument(format!("task {task} out of range (t = {})", self.task_count())))
    }

    pub fn forward_trunk_train(&self, x: &Tensor) -> Result<StackPass> {
        train_stack(&self.trunk, x)
    }

    pub fn forward_head_train(&self, task: usize, features: &Tensor) -> Result<StackPass> {
        train_stack(self.head(task)?, features)
    }

    /// Gradients of the head's parameters plus the gradient on the trunk
    /// features.
    pub fn backward_head(&self, task: usize, pass: &StackPass, dy: &Tensor) -> Result<(Tensor, Grads)> {
        let mut grads = Grads::new();
        let dfeat = backward_stack(
            self.head(task)?,
            &pass.caches,
            dy,
            true,
            |l, r| ParamKey::head(task, l, r),
            &mut grads,
        )?
        .expect("input gradient requested");
        Ok((dfeat, grads))
    }

    pub fn backward_trunk(&self, pass: &StackPass, dfeat: &Tensor) -> Result<Grads> {
        let mut grads = Grads::new();
        backward_stack(&self.trunk, &pass.caches, dfeat, false, ParamKey::trunk, &mut grads)?;
        Ok(grads)
    }

    pub fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.extend(layer.params().into_iter().map(|(r, p)| (ParamKey::trunk(i, r), p)));
        }
        for (j, head) in self.heads.iter().enumerate() {
            for (i, layer) in head.iter().enumerate() {
                out.extend(layer.params().into_iter().map(|(r, p)| (ParamKey::head(j, i, r), p)));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            out.extend(layer.params_mut().into_iter().map(|(r, p)| (ParamKey::trunk(i, r), p)));
        }
        for (j, head) in self.heads.iter_mut().enumerate() {
            for (i, layer) in head.iter_mut().enumerate() {
                out.extend(layer.params_mut().into_iter().map(|(r, p)| (ParamKey::head(j, i, r), p)));
            }
        }
        out
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Tensor> {
        self.params().into_iter().find(|(k, _)| k == key).map(|(_, p)| p)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Copy with every factorized trunk layer replaced by its plain
    /// contraction. Heads are untouched.
    pub fn contract(&self) -> Result<MtlModel> {
        let trunk = self.trunk.iter().map(Layer::contracted).collect::<Result<Vec<_>>>()?;
        MtlModel::new(
            trunk,
            self.heads.clone(),
            self.tasks.clone(),
            self.input_shape.clone(),
            self.sharing,
        )
    }

    pub fn to_dtype(&self, dtype: DType) -> MtlModel {
        let mut m = self.clone();
        for (_, p) in m.params_mut() {
            *p = p.cast(dtype);
        }
        m
    }

    /// Same topology: equal layer kinds (treating a factorized layer and
    /// its plain contraction as equal), task heads and input shape.
    pub fn same_topology(&self, other: &MtlModel) -> bool {
        fn kind(l: &Layer) -> &'static str {
            match l {
                Layer::FactorizedLinear(_) => "linear",
                Layer::FactorizedConv2d(_) => "conv2d",
                other => other.kind_name(),
            }
        }
        let stacks_match = |a: &[Layer], b: &[Layer]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| kind(x) == kind(y))
        };
        self.tasks == other.tasks
            && self.input_shape == other.input_shape
            && stacks_match(&self.trunk, &other.trunk)
            && self.heads.len() == other.heads.len()
            && self.heads.iter().zip(&other.heads).all(|(a, b)| stacks_match(a, b))
    }
}
