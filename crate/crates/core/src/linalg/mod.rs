//! SVD and parameter initialisers.

mod init;
mod spectral;
mod svd;

pub use init::{fans, init_dense, InitScheme};
pub use spectral::{check_rank, identity_diag_factors, reconstruct, spectral_factorize, Factors};
pub use svd::{svd, SvdResult, MAX_SWEEPS};
