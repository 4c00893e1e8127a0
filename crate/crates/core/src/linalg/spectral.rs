use super::init::{init_dense, InitScheme};
use super::svd::svd;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{DType, Tensor};

/// Factors `u` (m×r), `mdiag` (r), `v` (r×n) with `u·diag(mdiag)·v = w`.
#[derive(Clone, Debug)]
pub struct Factors {
    pub u: Tensor,
    pub mdiag: Tensor,
    pub v: Tensor,
}

pub fn check_rank(rank: usize, min_rank: usize) -> Result<()> {
    if rank < min_rank {
        return Err(Error::Rank { rank, min_rank });
    }
    Ok(())
}

/// Spectral initialisation: the leading `min(m, n)` directions come from the
/// SVD of `w`; any extra directions get fresh `scheme` draws scaled by
/// `1/sqrt(rank)` and a zero diagonal entry, so the product still equals `w`.
pub fn spectral_factorize(w: &Tensor, rank: usize, scheme: InitScheme, seed: u64) -> Result<Factors> {
    if w.rank() != 2 {
        return Err(Error::Shape(format!(
            "spectral_factorize needs a matrix, got {:?}",
            w.shape()
        )));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let q = m.min(n);
    check_rank(rank, q)?;
    let dec = svd(w)?;
    let dtype = w.dtype();
    let (su, ss, sv) = (dec.u.to_f64_vec(), dec.s.to_f64_vec(), dec.v.to_f64_vec());

    let mut u = vec![0.0; m * rank];
    let mut v = vec![0.0; rank * n];
    let mut mdiag = vec![0.0; rank];
    for i in 0..m {
        u[i * rank..i * rank + q].copy_from_slice(&su[i * q..(i + 1) * q]);
    }
    mdiag[..q].copy_from_slice(&ss);
    for j in 0..q {
        for c in 0..n {
            v[j * n + c] = sv[c * q + j];
        }
    }
    let extra = rank - q;
    if extra > 0 {
        let scale = 1.0 / (rank as f64).sqrt();
        let eu = init_dense(&[m, extra], scheme, derive_seed(seed, 1), DType::F64)?.to_f64_vec();
        let ev = init_dense(&[extra, n], scheme, derive_seed(seed, 2), DType::F64)?.to_f64_vec();
        for i in 0..m {
            for e in 0..extra {
                u[i * rank + q + e] = eu[i * extra + e] * scale;
            }
        }
        for e in 0..extra {
            for c in 0..n {
                v[(q + e) * n + c] = ev[e * n + c] * scale;
            }
        }
    }
    Ok(Factors {
        u: Tensor::from_parts(&[m, rank], u).cast(dtype),
        mdiag: Tensor::from_parts(&[rank], mdiag).cast(dtype),
        v: Tensor::from_parts(&[rank, n], v).cast(dtype),
    })
}

/// Identity-diagonal initialisation: `u` and `v` drawn with `scheme`, the
/// diagonal set to ones.
pub fn identity_diag_factors(
    m: usize,
    n: usize,
    rank: usize,
    scheme: InitScheme,
    seed: u64,
    dtype: DType,
) -> Result<Factors> {
    check_rank(rank, m.min(n))?;
    Ok(Factors {
        u: init_dense(&[m, rank], scheme, derive_seed(seed, 1), dtype)?,
        mdiag: Tensor::ones(&[rank], dtype)?,
        v: init_dense(&[rank, n], scheme, derive_seed(seed, 2), dtype)?,
    })
}

/// `u · diag(mdiag) · v`.
pub fn reconstruct(f: &Factors) -> Result<Tensor> {
    f.u.scale_columns(&f.mdiag)?.matmul(&f.v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let w = Tensor::eye(3, DType::F32).unwrap();
        let f = spectral_factorize(&w, 3, InitScheme::KaimingUniform, 0).unwrap();
        let back = reconstruct(&f).unwrap();
        assert!(back.rel_frobenius_diff(&w).unwrap() <= 1e-6);
    }

    #[test]
    fn extra_rank_keeps_product() {
        let w = init_dense(&[5, 3], InitScheme::KaimingUniform, 4, DType::F32).unwrap();
        let f = spectral_factorize(&w, 5, InitScheme::KaimingUniform, 4).unwrap();
        assert_eq!(f.u.shape(), &[5, 5]);
        assert_eq!(f.v.shape(), &[5, 3]);
        let md = f.mdiag.to_f64_vec();
        assert_eq!(&md[3..], &[0.0, 0.0]);
        // extra directions are non-trivial
        assert!(f.u.to_f64_vec().iter().skip(3).take(2).any(|x| *x != 0.0));
        assert!(reconstruct(&f).unwrap().rel_frobenius_diff(&w).unwrap() <= 1e-6);
    }

    #[test]
    fn rejects_compressing_rank() {
        let w = Tensor::eye(4, DType::F32).unwrap();
        assert!(matches!(
            spectral_factorize(&w, 3, InitScheme::KaimingUniform, 0),
            Err(Error::Rank { rank: 3, min_rank: 4 })
        ));
    }

    #[test]
    fn identity_diag_mode() {
        let f = identity_diag_factors(4, 3, 3, InitScheme::GlorotUniform, 1, DType::F32).unwrap();
        assert_eq!(f.mdiag.to_f64_vec(), vec![1.0; 3]);
        assert_eq!(f.u.shape(), &[4, 3]);
        assert_eq!(f.v.shape(), &[3, 3]);
    }
}
