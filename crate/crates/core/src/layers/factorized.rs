//! Overparameterised layers: a shared weight is expanded into
//! `U · diag(M) · V`, where the diagonal `M` is itself the elementwise
//! product of one diagonal per task. Contraction multiplies the factors back
//! into a single plain weight.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::dense::{self, check_bias, ConvGeometry, OpGrads};
use crate::error::{Error, Result};
use crate::linalg::{check_rank, identity_diag_factors, init_dense, spectral_factorize, Factors, InitScheme};
use crate::rng::derive_seed;
use crate::tensor::{invert_permutation, DType, Tensor};

/// How factors are initialised from a dense weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorInit {
    /// SVD of the dense weight; the product equals the dense weight.
    #[default]
    Spectral,
    /// Fresh `U`, `V` from the layer's init scheme and all-ones diagonals.
    IdentityDiag,
}

impl FactorInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Self::Spectral),
            "identity-diag" => Ok(Self::IdentityDiag),
            other => Err(Error::Argument(format!("unknown init `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Spectral => "spectral",
            Self::IdentityDiag => "identity-diag",
        }
    }
}

/// How a layer is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Contract the factors into one weight, then run the plain op.
    Contracted,
    /// Apply the factors one after another without forming the weight
    /// (`x·U`, scale, `·V` for linear; two separable convs for conv).
    Sequential,
}

/// Elementwise product of all task diagonals, accumulated left to right.
pub fn compose_diag(diags: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = diags
        .split_first()
        .ok_or_else(|| Error::Argument("compose_diag needs at least one diagonal".into()))?;
    if first.rank() != 1 {
        return Err(Error::Shape(format!(
            "task diagonal must be a vector, got {:?}",
            first.shape()
        )));
    }
    rest.iter().try_fold(first.clone(), |acc, d| acc.hadamard(d))
}

/// Product of every diagonal except `skip`; all ones when there is only one.
pub fn compose_diag_except(diags: &[Tensor], skip: usize) -> Result<Tensor> {
    let first = diags
        .first()
        .ok_or_else(|| Error::Argument("compose_diag needs at least one diagonal".into()))?;
    let mut acc = Tensor::ones(first.shape(), first.dtype())?;
    for (i, d) in diags.iter().enumerate() {
        if i != skip {
            acc = acc.hadamard(d)?;
        }
    }
    Ok(acc)
}

/// Contiguous blocks splitting `len` items across `parts` owners; the first
/// `len % parts` blocks get one extra item.
pub fn block_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let (base, extra) = (len / parts, len % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Splits a spectral diagonal across `tasks` factors whose product gives it
/// back: each positive entry becomes its `tasks`-th root in every factor;
/// zero entries stay zero in the first factor and one elsewhere so they can
/// still receive gradient.
fn split_diagonal(mdiag: &Tensor, tasks: usize) -> Result<Vec<Tensor>> {
    let vals = mdiag.to_f64_vec();
    (0..tasks)
        .map(|i| {
            let d: Vec<f64> = vals
                .iter()
                .map(|&s| {
                    if s > 0.0 {
                        s.powf(1.0 / tasks as f64)
                    } else if i == 0 {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect();
            Tensor::from_f64(&[d.len()], d).map(|t| t.cast(mdiag.dtype()))
        })
        .collect()
}

fn factors_from_dense(
    matrix: &Tensor,
    rank: usize,
    init: FactorInit,
    scheme: InitScheme,
    seed: u64,
) -> Result<Factors> {
    let (m, n) = (matrix.shape()[0], matrix.shape()[1]);
    match init {
        FactorInit::Spectral => spectral_factorize(matrix, rank, scheme, seed),
        FactorInit::IdentityDiag => identity_diag_factors(m, n, rank, scheme, seed, matrix.dtype()),
    }
}

/// Gradients of a loss with respect to the factors of `U · diag(M) · V`.
#[derive(Clone, Debug)]
pub struct FactorGrads {
    pub du: Tensor,
    pub dv: Tensor,
    pub d_task_diags: Vec<Tensor>,
}

/// Pulls a gradient on the contracted matrix back onto the factors
/// (all in matrix form: `u` m×r, `v` r×n).
fn factor_grads(u: &Tensor, diags: &[Tensor], v: &Tensor, dw: &Tensor) -> Result<FactorGrads> {
    let m = compose_diag(diags)?;
    let du = dw.matmul(&v.transpose()?)?.scale_columns(&m)?;
    let ut_dw = u.transpose()?.matmul(dw)?;
    let dv = ut_dw.scale_rows(&m)?;
    let dm = ut_dw.diag_of_product(&v.transpose()?)?;
    let d_task_diags = (0..diags.len())
        .map(|i| dm.hadamard(&compose_diag_except(diags, i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorGrads {
        du,
        dv,
        d_task_diags,
    })
}

/// All gradients of a factorized layer for one backward pass.
#[derive(Clone, Debug)]
pub struct FactorizedGrads {
    pub du: Tensor,
    pub dv: Tensor,
    pub d_task_diags: Vec<Tensor>,
    pub dbias: Option<Tensor>,
    pub dx: Option<Tensor>,
}

fn check_diags(diags: &[Tensor], rank: usize, dtype: DType) -> Result<()> {
    if diags.is_empty() {
        return Err(Error::Argument("a factorized layer needs at least one task diagonal".into()));
    }
    for d in diags {
        if d.shape() != [rank] {
            return Err(Error::dim("task_diag", d.shape(), &[rank]));
        }
        if d.dtype() != dtype {
            return Err(Error::DType {
                op: "task_diag",
                lhs: dtype,
                rhs: d.dtype(),
            });
        }
    }
    Ok(())
}

/// Fully connected layer with `W (m×n) = U (m×r) · diag(M) · V (r×n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLinear {
    pub u: Tensor,
    pub task_diags: Vec<Tensor>,
    pub v: Tensor,
    pub bias: Option<Tensor>,
}

impl FactorizedLinear {
    pub fn new(u: Tensor, task_diags: Vec<Tensor>, v: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if u.rank() != 2 || v.rank() != 2 || u.shape()[1] != v.shape()[0] {
            return Err(Error::dim("factorized_linear", u.shape(), v.shape()));
        }
        if u.dtype() != v.dtype() {
            return Err(Error::DType {
                op: "factorized_linear",
                lhs: u.dtype(),
                rhs: v.dtype(),
            });
        }
        let (m, r, n) = (u.shape()[0], u.shape()[1], v.shape()[1]);
        check_rank(r, m.min(n))?;
        check_diags(&task_diags, r, u.dtype())?;
        check_bias(&bias, n, u.dtype())?;
        Ok(Self {
            u,
            task_diags,
            v,
            bias,
        })
    }

    /// Factorizes a dense `weight` (m×n) into `tasks` diagonals of length
    /// `rank`.
    pub fn from_dense(
        weight: &Tensor,
        bias: Option<Tensor>,
        rank: usize,
        tasks: usize,
        init: FactorInit,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!("expected a matrix, got {:?}", weight.shape())));
        }
        if tasks == 0 {
            return Err(Error::Argument("task count must be at least 1".into()));
        }
        let f = factors_from_dense(weight, rank, init, scheme, seed)?;
        let diags = split_diagonal(&f.mdiag, tasks)?;
        Self::new(f.u, diags, f.v, bias)
    }

    pub fn in_features(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn tasks(&self) -> usize {
        self.task_diags.len()
    }

    pub fn dtype(&self) -> DType {
        self.u.dtype()
    }

    pub fn composed_diag(&self) -> Result<Tensor> {
        compose_diag(&self.task_diags)
    }

    /// `U · diag(M⁽¹⁾ ∘ … ∘ M⁽ᵗ⁾) · V`.
    pub fn contract(&self) -> Result<Tensor> {
        self.u.scale_columns(&self.composed_diag()?)?.matmul(&self.v)
    }

    pub fn to_linear(&self) -> Result<dense::Linear> {
        dense::Linear::new(self.contract()?, self.bias.clone())
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::dim("factorized_linear", x.shape(), &[self.in_features(), self.out_features()]));
        }
        match mode {
            ForwardMode::Contracted => dense::linear_forward(x, &self.contract()?, self.bias.as_ref()),
            ForwardMode::Sequential => {
                let h = x.matmul(&self.u)?.scale_columns(&self.composed_diag()?)?;
                let mut y = h.matmul(&self.v)?;
                if let Some(b) = &self.bias {
                    dense::add_channel_bias(&mut y, b)?;
                }
                Ok(y)
            }
        }
    }

    /// Factor gradients for a gradient `dw` on the contracted weight.
    pub fn weight_grad_to_factors(&self, dw: &Tensor) -> Result<FactorGrads> {
        factor_grads(&self.u, &self.task_diags, &self.v, dw)
    }

    /// Exact gradients of the contracted forward with respect to every
    /// factor, the bias and (optionally) the input.
    pub fn backward_with(&self, x: &Tensor, weight: &Tensor, dy: &Tensor, need_dx: bool) -> Result<FactorizedGrads> {
        let OpGrads { dx, dweight, dbias } =
            dense::linear_backward(x, weight, self.bias.is_some(), dy, need_dx)?;
        let fg = self.weight_grad_to_factors(&dweight)?;
        Ok(FactorizedGrads {
            du: fg.du,
            dv: fg.dv,
            d_task_diags: fg.d_task_diags,
            dbias,
            dx,
        })
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<FactorizedGrads> {
        self.backward_with(x, &self.contract()?, dy, true)
    }

    /// Training-time scalar count: `m·r + t·r + r·n` plus bias.
    pub fn param_count(&self) -> usize {
        let (m, r, n) = (self.in_features(), self.rank(), self.out_features());
        m * r + self.tasks() * r + r * n + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Convolution whose kernel is expanded in the spatial-SVD layout:
/// `U` (c_o×k×r), per-task diagonals (r), `V` (r×k×c_i).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedConv2d {
    pub u: Tensor,
    pub task_diags: Vec<Tensor>,
    pub v: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

/// c_o×c_i×k×k → c_o×k×k×c_i
const TO_SPATIAL: [usize; 4] = [0, 2, 3, 1];

/// Reorders a kernel to c_o×k×k×c_i and flattens it to (c_o·k)×(k·c_i).
pub fn kernel_to_matrix(kernel: &Tensor) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!("expected c_o×c_i×k×k kernel, got {s:?}")));
    }
    let (co, ci, k) = (s[0], s[1], s[2]);
    kernel.permute_axes(&TO_SPATIAL)?.reshape(&[co * k, k * ci])
}

/// Inverse of [`kernel_to_matrix`].
pub fn matrix_to_kernel(matrix: &Tensor, c_out: usize, c_in: usize, k: usize) -> Result<Tensor> {
    let back = invert_permutation(&TO_SPATIAL)?;
    matrix.reshaped(&[c_out, k, k, c_in])?.permute_axes(&back)
}

impl FactorizedConv2d {
    pub fn new(
        u: Tensor,
        task_diags: Vec<Tensor>,
        v: Tensor,
        bias: Option<Tensor>,
        geometry: ConvGeometry,
    ) -> Result<Self> {
        let (us, vs) = (u.shape(), v.shape());
        if us.len() != 3 || vs.len() != 3 || us[2] != vs[0] || us[1] != vs[1] {
            return Err(Error::dim("factorized_conv", us, vs));
        }
        if u.dtype() != v.dtype() {
            return Err(Error::DType {
                op: "factorized_conv",
                lhs: u.dtype(),
                rhs: v.dtype(),
            });
        }
        let (co, k, r, ci) = (us[0], us[1], us[2], vs[2]);
        check_rank(r, (co * k).min(ci * k))?;
        check_diags(&task_diags, r, u.dtype())?;
        check_bias(&bias, co, u.dtype())?;
        Ok(Self {
            u,
            task_diags,
            v,
            bias,
            geometry,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_dense(
        kernel: &Tensor,
        bias: Option<Tensor>,
        geometry: ConvGeometry,
        rank: usize,
        tasks: usize,
        init: FactorInit,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Argument("task count must be at least 1".into()));
        }
        let matrix = kernel_to_matrix(kernel)?;
        let s = kernel.shape();
        let (co, ci, k) = (s[0], s[1], s[2]);
        let f = match init {
            FactorInit::Spectral => factors_from_dense(&matrix, rank, init, scheme, seed)?,
            FactorInit::IdentityDiag => {
                check_rank(rank, (co * k).min(ci * k))?;
                Factors {
                    u: init_dense(&[co * k, rank], scheme, derive_seed(seed, 1), kernel.dtype())?,
                    mdiag: Tensor::ones(&[rank], kernel.dtype())?,
                    v: init_dense(&[rank, k * ci], scheme, derive_seed(seed, 2), kernel.dtype())?,
                }
            }
        };
        let diags = split_diagonal(&f.mdiag, tasks)?;
        Self::new(
            f.u.reshape(&[co, k, rank])?,
            diags,
            f.v.reshape(&[rank, k, ci])?,
            bias,
            geometry,
        )
    }

    pub fn c_out(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn kernel(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[2]
    }

    pub fn tasks(&self) -> usize {
        self.task_diags.len()
    }

    pub fn dtype(&self) -> DType {
        self.u.dtype()
    }

    fn u_matrix(&self) -> Result<Tensor> {
        self.u.reshaped(&[self.c_out() * self.kernel(), self.rank()])
    }

    fn v_matrix(&self) -> Result<Tensor> {
        self.v.reshaped(&[self.rank(), self.kernel() * self.c_in()])
    }

    pub fn composed_diag(&self) -> Result<Tensor> {
        compose_diag(&self.task_diags)
    }

    /// Contracted kernel, c_o×c_i×k×k.
    pub fn contract(&self) -> Result<Tensor> {
        let w = self
            .u_matrix()?
            .scale_columns(&self.composed_diag()?)?
            .matmul(&self.v_matrix()?)?;
        matrix_to_kernel(&w, self.c_out(), self.c_in(), self.kernel())
    }

    pub fn to_conv(&self) -> Result<dense::Conv2d> {
        dense::Conv2d::new(self.contract()?, self.bias.clone(), self.geometry)
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.c_in() {
            return Err(Error::dim(
                "factorized_conv",
                x.shape(),
                &[self.c_out(), self.c_in(), self.kernel(), self.kernel()],
            ));
        }
        let g = self.geometry;
        match mode {
            ForwardMode::Contracted => dense::conv_forward(x, &self.contract()?, self.bias.as_ref(), g),
            ForwardMode::Sequential => {
                let (co, ci, k, r) = (self.c_out(), self.c_in(), self.kernel(), self.rank());
                // horizontal stage: diag(M)·V as an r×c_i×1×k kernel
                let horiz = self
                    .v_matrix()?
                    .scale_rows(&self.composed_diag()?)?
                    .reshape(&[r, k, ci])?
                    .permute_axes(&[0, 2, 1])?
                    .reshape(&[r, ci, 1, k])?;
                let h = x.conv2d_rect(&horiz, (1, g.stride), (0, g.padding))?;
                // vertical stage: U as a c_o×r×k×1 kernel
                let vert = self.u.permute_axes(&[0, 2, 1])?.reshape(&[co, r, k, 1])?;
                let mut y = h.conv2d_rect(&vert, (g.stride, 1), (g.padding, 0))?;
                if let Some(b) = &self.bias {
                    dense::add_channel_bias(&mut y, b)?;
                }
                Ok(y)
            }
        }
    }

    /// Factor gradients (in c_o×k×r / r×k×c_i layout) for a gradient on the
    /// contracted kernel.
    pub fn weight_grad_to_factors(&self, dkernel: &Tensor) -> Result<FactorGrads> {
        let dw = kernel_to_matrix(dkernel)?;
        let fg = factor_grads(&self.u_matrix()?, &self.task_diags, &self.v_matrix()?, &dw)?;
        Ok(FactorGrads {
            du: fg.du.reshape(self.u.shape())?,
            dv: fg.dv.reshape(self.v.shape())?,
            d_task_diags: fg.d_task_diags,
        })
    }

    pub fn backward_with(&self, x: &Tensor, kernel: &Tensor, dy: &Tensor, need_dx: bool) -> Result<FactorizedGrads> {
        let OpGrads { dx, dweight, dbias } =
            dense::conv_backward(x, kernel, self.bias.is_some(), self.geometry, dy, need_dx)?;
        let fg = self.weight_grad_to_factors(&dweight)?;
        Ok(FactorizedGrads {
            du: fg.du,
            dv: fg.dv,
            d_task_diags: fg.d_task_diags,
            dbias,
            dx,
        })
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<FactorizedGrads> {
        self.backward_with(x, &self.contract()?, dy, true)
    }

    /// Training-time scalar count: `c_o·k·r + t·r + r·k·c_i` plus bias.
    pub fn param_count(&self) -> usize {
        self.u.len() + self.tasks() * self.rank() + self.v.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}
