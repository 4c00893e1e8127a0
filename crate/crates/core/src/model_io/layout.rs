//! Encoding of a whole [`MtlModel`] as a [`TensorArchive`].
//!
//! Parameters are stored under their [`ParamKey`] names (`trunk.3.u`,
//! `trunk.3.diag.1`, `head.0.0.weight`, ...). The architecture goes into a
//! float64 vector named [`LAYOUT_NAME`]:
//!
//! ```text
//! [version, sharing, t, input_rank, input dims...,
//!  t × (loss, channels),
//!  trunk_len, trunk_len × (kind, stride, padding),
//!  t × (head_len, head_len × (kind, stride, padding))]
//! ```

use std::collections::BTreeSet;

use super::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::layers::{
    Conv2d, ConvGeometry, FactorizedConv2d, FactorizedLinear, Layer, Linear, LossKind, MtlModel, ParamKey, ParamRole,
    Sharing, Site, TaskHead,
};
use crate::tensor::Tensor;

pub const LAYOUT_NAME: &str = "meta.layout";
const LAYOUT_VERSION: f64 = 1.0;

fn kind_code(layer: &Layer) -> (u8, ConvGeometry) {
    let none = ConvGeometry::default();
    match layer {
        Layer::Linear(_) => (0, none),
        Layer::Conv2d(c) => (1, c.geometry),
        Layer::FactorizedLinear(_) => (2, none),
        Layer::FactorizedConv2d(c) => (3, c.geometry),
        Layer::Relu => (4, none),
        Layer::MaxPool2 => (5, none),
        Layer::Upsample2 => (6, none),
    }
}

fn push_stack(out: &mut Vec<f64>, layers: &[Layer]) {
    out.push(layers.len() as f64);
    for l in layers {
        let (code, g) = kind_code(l);
        out.extend([code as f64, g.stride as f64, g.padding as f64]);
    }
}

pub fn encode_layout(model: &MtlModel) -> Tensor {
    let mut v = vec![
        LAYOUT_VERSION,
        model.sharing.code() as f64,
        model.task_count() as f64,
        model.input_shape.len() as f64,
    ];
    v.extend(model.input_shape.iter().map(|&d| d as f64));
    for task in &model.tasks {
        v.extend([task.loss.code() as f64, task.channels as f64]);
    }
    push_stack(&mut v, &model.trunk);
    for head in &model.heads {
        push_stack(&mut v, head);
    }
    let n = v.len();
    Tensor::from_f64(&[n], v).expect("layout values are finite")
}

pub fn model_to_archive(model: &MtlModel) -> TensorArchive {
    let mut a = TensorArchive::new();
    a.push(LAYOUT_NAME, encode_layout(model));
    for (key, t) in model.params() {
        a.push(key.name(), t.clone());
    }
    a
}

struct Cursor<'a> {
    vals: &'a [f64],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self, what: &str) -> Result<usize> {
        let v = *self
            .vals
            .get(self.pos)
            .ok_or_else(|| Error::Format(format!("layout ends before {what}")))?;
        self.pos += 1;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Format(format!("layout value {v} for {what} is not a count")));
        }
        Ok(v as usize)
    }
}

struct Fetch<'a> {
    archive: &'a TensorArchive,
    used: BTreeSet<String>,
}

impl Fetch<'_> {
    fn get(&mut self, key: ParamKey) -> Option<Tensor> {
        let name = key.name();
        let t = self.archive.get(&name).cloned();
        if t.is_some() {
            self.used.insert(name);
        }
        t
    }

    fn need(&mut self, key: ParamKey) -> Result<Tensor> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("archive lacks tensor `{}`", key.name())))
    }
}

fn read_stack(
    cur: &mut Cursor,
    fetch: &mut Fetch,
    key: &dyn Fn(usize, ParamRole) -> ParamKey,
    diags: usize,
) -> Result<Vec<Layer>> {
    let n = cur.next("stack length")?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let code = cur.next("layer kind")?;
        let geometry = ConvGeometry {
            stride: cur.next("stride")?,
            padding: cur.next("padding")?,
        };
        let k = |role| key(i, role);
        let layer = match code {
            0 => Layer::Linear(Linear::new(fetch.need(k(ParamRole::Weight))?, fetch.get(k(ParamRole::Bias)))?),
            1 => Layer::Conv2d(Conv2d::new(
                fetch.need(k(ParamRole::Weight))?,
                fetch.get(k(ParamRole::Bias)),
                geometry,
            )?),
            2 | 3 => {
                let u = fetch.need(k(ParamRole::U))?;
                let v = fetch.need(k(ParamRole::V))?;
                let d = (0..diags)
                    .map(|j| fetch.need(k(ParamRole::Diag(j))))
                    .collect::<Result<Vec<_>>>()?;
                let b = fetch.get(k(ParamRole::Bias));
                if code == 2 {
                    Layer::FactorizedLinear(FactorizedLinear::new(u, d, v, b)?)
                } else {
                    Layer::FactorizedConv2d(FactorizedConv2d::new(u, d, v, b, geometry)?)
                }
            }
            4 => Layer::Relu,
            5 => Layer::MaxPool2,
            6 => Layer::Upsample2,
            other => return Err(Error::Format(format!("unknown layer kind code {other}"))),
        };
        layers.push(layer);
    }
    Ok(layers)
}

pub fn model_from_archive(archive: &TensorArchive) -> Result<MtlModel> {
    let layout = archive
        .get(LAYOUT_NAME)
        .ok_or_else(|| Error::Format(format!("archive has no `{LAYOUT_NAME}` tensor; not a model archive")))?;
    let vals = layout.to_f64_vec();
    if vals.first() != Some(&LAYOUT_VERSION) {
        return Err(Error::Format(format!("unsupported layout version {:?}", vals.first())));
    }
    let mut cur = Cursor { vals: &vals, pos: 1 };
    let sharing = Sharing::from_code(cur.next("sharing")? as u8)?;
    let t = cur.next("task count")?;
    let rank = cur.next("input rank")?;
    let input_shape = (0..rank).map(|_| cur.next("input extent")).collect::<Result<Vec<_>>>()?;
    let tasks = (0..t)
        .map(|_| {
            let loss = LossKind::from_code(cur.next("loss")? as u8)?;
            Ok(TaskHead {
                loss,
                channels: cur.next("channels")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fetch = Fetch {
        archive,
        used: BTreeSet::new(),
    };
    let diags = sharing.diag_count(t);
    let trunk = read_stack(&mut cur, &mut fetch, &ParamKey::trunk, diags)?;
    let heads = (0..t)
        .map(|j| read_stack(&mut cur, &mut fetch, &move |l, r| ParamKey::head(j, l, r), diags))
        .collect::<Result<Vec<_>>>()?;
    if cur.pos != vals.len() {
        return Err(Error::Format("layout has trailing values".into()));
    }
    if let Some(extra) = archive
        .names()
        .find(|n| *n != LAYOUT_NAME && !fetch.used.contains(*n))
    {
        return Err(Error::Format(format!("archive tensor `{extra}` does not belong to the model")));
    }
    MtlModel::new(trunk, heads, tasks, input_shape, sharing)
}

pub fn save_model(model: &MtlModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    model_to_archive(model).save(path)
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<MtlModel> {
    model_from_archive(&TensorArchive::load(path)?)
}

/// Whether a tensor name belongs to a task diagonal.
pub fn is_diag_name(name: &str) -> bool {
    ParamKey::parse(name).is_ok_and(|k| k.site == Site::Trunk && k.role.is_diag())
}
