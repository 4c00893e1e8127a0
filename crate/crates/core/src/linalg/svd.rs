//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy of `A` are rotated pairwise until mutually
//! orthogonal; the column norms are then the singular values and the
//! accumulated rotations form `V`. Pairs are visited in a fixed cyclic order
//! so the result is a deterministic function of the input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SWEEPS: usize = 80;

/// `a = u · diag(s) · vᵀ` with `u` m×q, `s` length q, `v` n×q, q = min(m, n).
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

struct Thin {
    u: Vec<Vec<f64>>,
    s: Vec<f64>,
    v: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yp) = (*x, *y);
        *x = c * xp - s * yp;
        *y = s * xp + c * yp;
    }
}

/// Jacobi on a tall (rows ≥ cols) matrix given as columns.
fn jacobi_tall(mut cols: Vec<Vec<f64>>, rows: usize) -> Result<Thin> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * rows as f64;
    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        converged = true;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= tol * scale {
                    continue;
                }
                residual = residual.max(gamma.abs() / scale);
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
    }
    if !converged {
        return Err(Error::Numerical { sweeps, residual });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s_max = order.first().map_or(0.0, |&i| norms[i]);
    let floor = s_max * f64::EPSILON * rows.max(n) as f64;

    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        vs.push(v[j].clone());
        if sj > floor && sj > 0.0 {
            u.push(cols[j].iter().map(|x| x / sj).collect());
        } else {
            u.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_basis(&mut u, &deficient, rows);
    Ok(Thin { u, s, v: vs })
}

/// Fills the listed columns with unit vectors orthogonal to all others,
/// drawn from the standard basis by Gram-Schmidt (two passes).
fn complete_basis(u: &mut [Vec<f64>], slots: &[usize], rows: usize) {
    for &slot in slots {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _ in 0..2 {
                for (k, col) in u.iter().enumerate() {
                    if k == slot || (slots.contains(&k) && col.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&cand, col);
                    cand.iter_mut().zip(col).for_each(|(c, &x)| *c -= proj * x);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > best_norm + 1e-12 {
                best_norm = norm;
                best = Some(cand);
            }
            if best_norm > 0.5 {
                break;
            }
        }
        let cand = best.expect("a tall matrix always has a complementary direction");
        u[slot] = cand.iter().map(|x| x / best_norm).collect();
    }
}

/// Flips column pairs so the largest-magnitude entry of each `u` column is
/// positive (first such entry on ties).
fn fix_signs(t: &mut Thin) {
    for (uc, vc) in t.u.iter_mut().zip(t.v.iter_mut()) {
        let mut idx = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[idx].abs() {
                idx = i;
            }
        }
        if uc[idx] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn columns_to_tensor(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let q = cols.len();
    let mut data = vec![0.0; rows * q];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * q + j] = x;
        }
    }
    Tensor::from_parts(&[rows, q], data)
}

/// Thin SVD of a matrix. Computed in f64; outputs are returned in the
/// input's dtype.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!(
            "svd needs a matrix, got shape {:?}",
            a.shape()
        )));
    }
    if let Some(index) = a.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let data = a.to_f64_vec();
    let wide = m < n;
    // columns of A (tall) or of Aᵀ (wide)
    let (rows, cols): (usize, Vec<Vec<f64>>) = if wide {
        (n, (0..m).map(|i| data[i * n..(i + 1) * n].to_vec()).collect())
    } else {
        (m, (0..n).map(|j| (0..m).map(|i| data[i * n + j]).collect()).collect())
    };
    let thin = jacobi_tall(cols, rows)?;
    let mut thin = if wide {
        Thin {
            u: thin.v,
            s: thin.s,
            v: thin.u,
        }
    } else {
        thin
    };
    fix_signs(&mut thin);
    let q = thin.s.len();
    let dtype = a.dtype();
    Ok(SvdResult {
        u: columns_to_tensor(&thin.u, m).cast(dtype),
        s: Tensor::from_parts(&[q], thin.s).cast(dtype),
        v: columns_to_tensor(&thin.v, n).cast(dtype),
    })
}
